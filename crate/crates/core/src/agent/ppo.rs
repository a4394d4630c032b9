//! Clipped policy-gradient update of the scheduling heads, regression of the
//! critic and gain ascent of the beam phases.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape, Tensor, Var};

use super::networks::{self, group, Nets, RecurrentState, ScheduleHeads, SPATIAL_FEATURES};
use super::train::Rollout;
use super::Agent;

/// Averages over the minibatches of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean clipped surrogate (to be maximised).
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean normalised gain towards the estimated channels.
    pub spatial_gain: f64,
    pub steps: usize,
}

/// Scaled discounted returns and normalised advantages of a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Updates the reward statistics with the rollout and computes targets.
pub fn targets(agent: &mut Agent, rollout: &Rollout) -> Targets {
    let gamma = agent.config.gamma;
    let mut discounted = 0.0;
    for t in &rollout.transitions {
        discounted = gamma * discounted + t.reward;
        agent.reward_scale.push(discounted);
    }
    let scale = 1.0 / agent.reward_scale.std();
    let lambda = agent.config.gae_lambda;
    let n = rollout.transitions.len();
    let mut returns = vec![0.0; n];
    let mut advantages = vec![0.0; n];
    let mut next_value = rollout.bootstrap;
    let mut acc = 0.0;
    for i in (0..n).rev() {
        let t = &rollout.transitions[i];
        let delta = t.reward * scale + gamma * next_value - t.value;
        acc = delta + gamma * lambda * acc;
        advantages[i] = acc;
        returns[i] = acc + t.value;
        next_value = t.value;
    }
    if n > 1 {
        let mean = advantages.iter().sum::<f64>() / n as f64;
        let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt().max(1e-8);
        advantages.iter_mut().for_each(|a| *a = (*a - mean) / sd);
    }
    Targets { returns, advantages }
}

/// Per-row inputs of the policy loss.
struct StepData {
    pi: Tensor,
    not_pi: Tensor,
    z: Tensor,
    old: Tensor,
    adv: Tensor,
    mask: Tensor,
}

impl StepData {
    fn with_rows(rows: usize, k: usize) -> Self {
        StepData {
            pi: Tensor::zeros(rows, k),
            not_pi: Tensor::zeros(rows, k),
            z: Tensor::zeros(rows, k + 1),
            old: Tensor::zeros(rows, 1),
            adv: Tensor::zeros(rows, 1),
            mask: Tensor::zeros(rows, 1),
        }
    }

    fn set(&mut self, row: usize, rollout: &Rollout, targets: &Targets, i: usize) {
        let t = &rollout.transitions[i];
        for (j, &on) in t.pi.iter().enumerate() {
            self.pi.row_mut(row)[j] = if on { 1.0 } else { 0.0 };
            self.not_pi.row_mut(row)[j] = if on { 0.0 } else { 1.0 };
        }
        self.z.row_mut(row).copy_from_slice(&t.z);
        self.old.data[row] = t.log_prob;
        self.adv.data[row] = targets.advantages[i];
        self.mask.data[row] = 1.0;
    }
}

/// Per-row log-probability of the stored actions, plus the activation
/// log-sigmoids reused by the entropy.
fn log_prob_var(tape: &mut Tape, heads: ScheduleHeads, d: &StepData) -> Result<(Var, (Var, Var))> {
    let rows = d.mask.rows;
    let k1 = d.z.cols as f64;
    let ls_pos = tape.log_sigmoid(heads.logits);
    let flipped = tape.scale(heads.logits, -1.0);
    let ls_neg = tape.log_sigmoid(flipped);
    let pi = tape.constant(d.pi.clone());
    let not_pi = tape.constant(d.not_pi.clone());
    let on = tape.mul(pi, ls_pos)?;
    let off = tape.mul(not_pi, ls_neg)?;
    let lp = tape.add(on, off)?;
    let lp_bern = tape.sum_cols(lp);

    let log_std = tape.broadcast_rows(heads.log_std, rows)?;
    let neg_log_std = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg_log_std);
    let z = tape.constant(d.z.clone());
    let diff = tape.sub(z, heads.means)?;
    let standard = tape.mul(diff, inv_std)?;
    let sq = tape.square(standard);
    let half = tape.scale(sq, -0.5);
    let lg = tape.sub(half, log_std)?;
    let lg = tape.sum_cols(lg);
    let lp_gauss = tape.add_scalar(lg, -0.5 * k1 * (2.0 * std::f64::consts::PI).ln());
    Ok((tape.add(lp_bern, lp_gauss)?, (ls_pos, ls_neg)))
}

/// Masked sums of the clipped surrogate and of the policy entropy.
fn policy_terms(tape: &mut Tape, heads: ScheduleHeads, d: &StepData, clip: f64) -> Result<(Var, Var)> {
    let rows = d.mask.rows;
    let (logp, (ls_pos, ls_neg)) = log_prob_var(tape, heads, d)?;
    let old = tape.constant(d.old.clone());
    let delta = tape.sub(logp, old)?;
    let delta = tape.clamp(delta, -20.0, 20.0);
    let ratio = tape.exp(delta);
    let adv = tape.constant(d.adv.clone());
    let unclipped = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let clipped = tape.mul(clipped, adv)?;
    let obj = tape.minimum(unclipped, clipped)?;
    let mask = tape.constant(d.mask.clone());
    let obj = tape.mul(obj, mask)?;
    let surrogate = tape.sum(obj);

    let p = tape.sigmoid(heads.logits);
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let a = tape.mul(p, ls_pos)?;
    let b = tape.mul(q, ls_neg)?;
    let nh = tape.add(a, b)?;
    let nh = tape.sum_cols(nh);
    let h_bern = tape.scale(nh, -1.0);
    let h_gauss = tape.sum_cols(heads.log_std);
    let h_gauss = tape.broadcast_rows(h_gauss, rows)?;
    let h = tape.add(h_bern, h_gauss)?;
    let h = tape.mul(h, mask)?;
    let entropy = tape.sum(h);
    Ok((surrogate, entropy))
}

/// Masked squared error between values (R, 1) and targets.
fn value_loss(tape: &mut Tape, value: Var, returns: &[f64], mask: Option<&Tensor>) -> Result<Var> {
    let target = tape.constant(Tensor::from_vec(returns.len(), 1, returns.to_vec())?);
    let err = tape.sub(value, target)?;
    let sq = tape.square(err);
    let sq = match mask {
        Some(m) => {
            let m = tape.constant(m.clone());
            tape.mul(sq, m)?
        }
        None => sq,
    };
    Ok(tape.sum(sq))
}

/// Mean gain of (R, K * M) phase outputs, one block of `M` per vehicle.
fn mean_block_gain(tape: &mut Tape, raw: Var, k: usize, m: usize) -> Result<Var> {
    let rows = tape.shape(raw).0;
    let mut total: Option<Var> = None;
    for i in 0..k {
        let block = tape.slice_cols(raw, i * m, m)?;
        let g = networks::normalized_gain(tape, block)?;
        let g = tape.sum(g);
        total = Some(match total {
            Some(t) => tape.add(t, g)?,
            None => g,
        });
    }
    let total = total.ok_or_else(|| Error::Shape("no vehicles".into()))?;
    Ok(tape.scale(total, 1.0 / (rows * k) as f64))
}

fn apply_gradients(agent: &mut Agent, grads: &crate::nn::Gradients, groups: &[usize]) -> Result<()> {
    let max_norm = agent.config.max_grad_norm;
    for &g in groups {
        let store = &mut agent.stores[g];
        store.zero_grad();
        grads.accumulate(g, store);
        store.clip_grad_norm(max_norm);
        agent.optimizers[g].update(store)?;
    }
    Ok(())
}

fn check_finite(agent: &Agent, what: &str, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        let norms: Vec<String> = agent.stores.iter().map(|s| format!("{}={:.3e}", s.group, s.norm())).collect();
        return Err(Error::NonFinite(format!("{what} loss is {loss} (parameter norms: {})", norms.join(", "))));
    }
    Ok(())
}

fn temporal_row(rollout: &Rollout, i: usize) -> &[f64] {
    &rollout.transitions[i].obs.temporal
}

fn flat_row(rollout: &Rollout, i: usize) -> Vec<f64> {
    let o = &rollout.transitions[i].obs;
    let mut x = o.temporal.clone();
    x.extend_from_slice(&o.spatial);
    x
}

/// Updates the parameters that decide activation and CPU shares (and, for
/// the single-group ablations, everything else) from one rollout.
pub fn scheduling_update<R: Rng + ?Sized>(agent: &mut Agent, rollout: &Rollout, targets: &Targets, rng: &mut R) -> Result<UpdateStats> {
    if rollout.transitions.is_empty() {
        return Ok(UpdateStats::default());
    }
    match agent.nets {
        Nets::Hetero(_) => recurrent_update(agent, rollout, targets, rng),
        Nets::Mono(_) | Nets::Homo(_) => flat_update(agent, rollout, targets, rng),
    }
}

fn recurrent_update<R: Rng + ?Sized>(agent: &mut Agent, rollout: &Rollout, targets: &Targets, rng: &mut R) -> Result<UpdateStats> {
    let Nets::Hetero(nets) = agent.nets.clone() else { unreachable!() };
    let cfg = agent.config.clone();
    let (k, hidden) = (agent.vehicles, cfg.temporal_hidden);
    let n = rollout.transitions.len();
    let dt = networks::temporal_dim(k);
    let mut windows: Vec<usize> = (0..n).step_by(cfg.bptt).collect();
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.epochs {
        windows.shuffle(rng);
        for chunk in windows.chunks(cfg.windows_per_batch) {
            let b = chunk.len();
            let len = chunk.iter().map(|&s| (n - s).min(cfg.bptt)).max().unwrap_or(0);
            let mut h0 = Tensor::zeros(b, hidden);
            let mut c0 = Tensor::zeros(b, hidden);
            for (r, &s) in chunk.iter().enumerate() {
                if let Some(RecurrentState { h, c }) = &rollout.transitions[s].recurrent {
                    h0.row_mut(r).copy_from_slice(h.row(0));
                    c0.row_mut(r).copy_from_slice(c.row(0));
                }
            }
            let mut inputs = Vec::with_capacity(len);
            let mut steps = Vec::with_capacity(len);
            let mut critic_x = Vec::new();
            let mut critic_y = Vec::new();
            for t in 0..len {
                let mut x = Tensor::zeros(b, dt);
                let mut d = StepData::with_rows(b, k);
                for (r, &s) in chunk.iter().enumerate() {
                    let i = s + t;
                    if t < cfg.bptt && i < n {
                        x.row_mut(r).copy_from_slice(temporal_row(rollout, i));
                        d.set(r, rollout, targets, i);
                        critic_x.extend_from_slice(temporal_row(rollout, i));
                        critic_y.push(targets.returns[i]);
                    }
                }
                inputs.push(x);
                steps.push(d);
            }
            let count = critic_y.len() as f64;
            let refs: Vec<&ParamStore> = agent.stores.iter().collect();
            let mut tape = Tape::new(&refs);
            let xs: Vec<Var> = inputs.into_iter().map(|x| tape.constant(x)).collect();
            let h = tape.constant(h0);
            let c = tape.constant(c0);
            let (heads, _, _) = nets.temporal_sequence(&mut tape, &xs, h, c)?;
            let mut surrogate: Option<Var> = None;
            let mut entropy: Option<Var> = None;
            for (head, d) in heads.into_iter().zip(&steps) {
                let (s, e) = policy_terms(&mut tape, head, d, cfg.clip)?;
                surrogate = Some(match surrogate {
                    Some(acc) => tape.add(acc, s)?,
                    None => s,
                });
                entropy = Some(match entropy {
                    Some(acc) => tape.add(acc, e)?,
                    None => e,
                });
            }
            let (surrogate, entropy) = (surrogate.expect("non-empty"), entropy.expect("non-empty"));
            let cx = tape.constant(Tensor::from_vec(critic_y.len(), dt, critic_x)?);
            let v = nets.value(&mut tape, cx)?;
            let vl = value_loss(&mut tape, v, &critic_y, None)?;

            let s = tape.scale(surrogate, -1.0 / count);
            let e = tape.scale(entropy, -cfg.entropy_coef / count);
            let vl_term = tape.scale(vl, cfg.value_coef / count);
            let loss = tape.add(s, e)?;
            let loss = tape.add(loss, vl_term)?;
            let loss_value = tape.value(loss).item();
            stats.surrogate += tape.value(surrogate).item() / count;
            stats.entropy += tape.value(entropy).item() / count;
            stats.value_loss += tape.value(vl).item() / count;
            let grads = tape.backward(loss)?;
            drop(tape);
            check_finite(agent, "scheduling", loss_value)?;
            debug_assert!(grads.untouched(group::SPATIAL));
            apply_gradients(agent, &grads, &[group::TEMPORAL, group::CRITIC])?;
            stats.steps += 1;
        }
    }
    Ok(average(stats))
}

fn flat_update<R: Rng + ?Sized>(agent: &mut Agent, rollout: &Rollout, targets: &Targets, rng: &mut R) -> Result<UpdateStats> {
    let nets = agent.nets.clone();
    let cfg = agent.config.clone();
    let (k, m) = (agent.vehicles, agent.antennas);
    let n = rollout.transitions.len();
    let dt = networks::temporal_dim(k);
    let width = dt + SPATIAL_FEATURES * k;
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_rows) {
            let b = chunk.len();
            let mut x = Vec::with_capacity(b * width);
            let mut xt = Vec::with_capacity(b * dt);
            let mut y = Vec::with_capacity(b);
            let mut d = StepData::with_rows(b, k);
            for (r, &i) in chunk.iter().enumerate() {
                x.extend(flat_row(rollout, i));
                xt.extend_from_slice(temporal_row(rollout, i));
                y.push(targets.returns[i]);
                d.set(r, rollout, targets, i);
            }
            let count = b as f64;
            let refs: Vec<&ParamStore> = agent.stores.iter().collect();
            let mut tape = Tape::new(&refs);
            let input = tape.constant(Tensor::from_vec(b, width, x)?);
            let (out, value, groups): (_, Var, Vec<usize>) = match &nets {
                Nets::Mono(net) => {
                    let out = net.forward(&mut tape, input)?;
                    let v = out.value.expect("shared value head");
                    (out, v, vec![group::SHARED])
                }
                Nets::Homo(net) => {
                    let out = net.forward(&mut tape, input, k, m)?;
                    let t = tape.constant(Tensor::from_vec(b, dt, xt)?);
                    let v = net.value(&mut tape, t)?;
                    (out, v, vec![group::HOMO_ACTOR, group::HOMO_CRITIC])
                }
                Nets::Hetero(_) => unreachable!(),
            };
            let (surrogate, entropy) = policy_terms(&mut tape, out.heads, &d, cfg.clip)?;
            let vl = value_loss(&mut tape, value, &y, None)?;
            let gain = mean_block_gain(&mut tape, out.phase_raw, k, m)?;
            let s = tape.scale(surrogate, -1.0 / count);
            let e = tape.scale(entropy, -cfg.entropy_coef / count);
            let vl_term = tape.scale(vl, cfg.value_coef / count);
            let g_term = tape.scale(gain, -cfg.spatial_weight);
            let loss = tape.add(s, e)?;
            let loss = tape.add(loss, vl_term)?;
            let loss = tape.add(loss, g_term)?;
            let loss_value = tape.value(loss).item();
            stats.surrogate += tape.value(surrogate).item() / count;
            stats.entropy += tape.value(entropy).item() / count;
            stats.value_loss += tape.value(vl).item() / count;
            stats.spatial_gain += tape.value(gain).item();
            let grads = tape.backward(loss)?;
            drop(tape);
            check_finite(agent, "joint", loss_value)?;
            apply_gradients(agent, &grads, &groups)?;
            stats.steps += 1;
        }
    }
    Ok(average(stats))
}

/// Gain ascent of the spatial expert on the rollout's per-vehicle features.
/// Only the spatial group changes. The single-group variants train their
/// phases inside [`scheduling_update`], so this is a no-op for them.
pub fn spatial_update<R: Rng + ?Sized>(agent: &mut Agent, rollout: &Rollout, rng: &mut R) -> Result<UpdateStats> {
    let Nets::Hetero(nets) = agent.nets.clone() else {
        return Ok(UpdateStats::default());
    };
    let k = agent.vehicles;
    let mut rows: Vec<&[f64]> = Vec::with_capacity(rollout.transitions.len() * k);
    for t in &rollout.transitions {
        rows.extend(t.obs.spatial.chunks(SPATIAL_FEATURES));
    }
    let mut stats = UpdateStats::default();
    for _ in 0..agent.config.spatial_epochs {
        rows.shuffle(rng);
        for chunk in rows.chunks(agent.config.batch_rows * k) {
            stats.spatial_gain += spatial_step(agent, &nets, chunk)?;
            stats.steps += 1;
        }
    }
    Ok(average(stats))
}

/// One ascent step on a batch of feature rows; returns the gain before the
/// step.
pub fn spatial_step(agent: &mut Agent, nets: &networks::HeteroNets, rows: &[&[f64]]) -> Result<f64> {
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let refs: Vec<&ParamStore> = agent.stores.iter().collect();
    let mut tape = Tape::new(&refs);
    let x = tape.constant(Tensor::from_vec(rows.len(), SPATIAL_FEATURES, data)?);
    let raw = nets.spatial_raw(&mut tape, x)?;
    let gain = networks::normalized_gain(&mut tape, raw)?;
    let gain = tape.mean(gain);
    let loss = tape.scale(gain, -agent.config.spatial_weight);
    let g = tape.value(gain).item();
    let grads = tape.backward(loss)?;
    drop(tape);
    check_finite(agent, "spatial", g)?;
    debug_assert!(grads.untouched(group::TEMPORAL) && grads.untouched(group::CRITIC));
    apply_gradients(agent, &grads, &[group::SPATIAL])?;
    Ok(g)
}

/// Scheduling update followed by the spatial update, each touching only its
/// own parameter groups.
pub fn decoupled_update<R: Rng + ?Sized>(agent: &mut Agent, rollout: &Rollout, rng: &mut R) -> Result<UpdateStats> {
    let targets = targets(agent, rollout);
    let mut stats = scheduling_update(agent, rollout, &targets, rng)?;
    let spatial = spatial_update(agent, rollout, rng)?;
    if spatial.steps > 0 {
        stats.spatial_gain = spatial.spatial_gain;
        stats.steps += spatial.steps;
    }
    Ok(stats)
}

fn average(mut s: UpdateStats) -> UpdateStats {
    if s.steps > 0 {
        let n = s.steps as f64;
        s.surrogate /= n;
        s.value_loss /= n;
        s.entropy /= n;
        s.spatial_gain /= n;
    }
    s
}

/// Log-probabilities of the rollout's actions under the current parameters,
/// evaluated along the same windows as the update. Before any update they
/// equal the behaviour log-probabilities.
pub fn log_probs(agent: &Agent, rollout: &Rollout) -> Result<Vec<f64>> {
    let n = rollout.transitions.len();
    let k = agent.vehicles;
    let zero = Targets { returns: vec![0.0; n], advantages: vec![0.0; n] };
    let refs: Vec<&ParamStore> = agent.stores.iter().collect();
    let mut out = Vec::with_capacity(n);
    let logp_of = |tape: &mut Tape, heads: ScheduleHeads, d: &StepData| -> Result<Vec<f64>> {
        let (logp, _) = log_prob_var(tape, heads, d)?;
        Ok(tape.value(logp).data.clone())
    };
    match &agent.nets {
        Nets::Hetero(nets) => {
            let hidden = agent.config.temporal_hidden;
            for s in (0..n).step_by(agent.config.bptt) {
                let len = (n - s).min(agent.config.bptt);
                let mut tape = Tape::new(&refs);
                let st = rollout.transitions[s].recurrent.clone().unwrap_or_else(|| RecurrentState::zeros(1, hidden));
                let h = tape.constant(st.h);
                let c = tape.constant(st.c);
                let xs: Vec<Var> = (s..s + len).map(|i| tape.constant(Tensor::row_vector(temporal_row(rollout, i).to_vec()))).collect();
                let (heads, _, _) = nets.temporal_sequence(&mut tape, &xs, h, c)?;
                for (t, head) in heads.into_iter().enumerate() {
                    let mut d = StepData::with_rows(1, k);
                    d.set(0, rollout, &zero, s + t);
                    out.extend(logp_of(&mut tape, head, &d)?);
                }
            }
        }
        Nets::Mono(_) | Nets::Homo(_) => {
            for i in 0..n {
                let mut tape = Tape::new(&refs);
                let x = tape.constant(Tensor::row_vector(flat_row(rollout, i)));
                let outs = match &agent.nets {
                    Nets::Mono(net) => net.forward(&mut tape, x)?,
                    Nets::Homo(net) => net.forward(&mut tape, x, k, agent.antennas)?,
                    Nets::Hetero(_) => unreachable!(),
                };
                let mut d = StepData::with_rows(1, k);
                d.set(0, rollout, &zero, i);
                out.extend(logp_of(&mut tape, outs.heads, &d)?);
            }
        }
    }
    Ok(out)
}
