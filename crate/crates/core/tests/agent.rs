use isac_core::agent::networks::{self, group, Nets};
use isac_core::agent::{collect_rollout, ppo, train, Agent, AgentConfig, TrainConfig, Variant};
use isac_core::edge;
use isac_core::env::Environment;
use isac_core::harness::run_episode;
use isac_core::nn::{grad_check, Tape, Tensor};
use isac_core::scenario::rng_for;
use isac_core::{toy_config, SimConfig};

fn small_sim() -> SimConfig {
    let mut cfg = toy_config();
    cfg.antennas = 16;
    cfg.beamwidth = 2.0 / 16.0;
    cfg
}

fn small_agent(variant: Variant, seed: u64) -> (Agent, SimConfig) {
    let cfg = small_sim();
    let ac = AgentConfig {
        temporal_hidden: 12,
        spatial_hidden: 16,
        critic_hidden: 12,
        mono_hidden: 16,
        bptt: 8,
        epochs: 2,
        batch_rows: 16,
        seed,
        ..AgentConfig::default()
    };
    (Agent::new(variant, ac, &cfg).unwrap(), cfg)
}

fn rollout(agent: &mut Agent, cfg: &SimConfig, slots: usize, keep: bool) -> isac_core::agent::Rollout {
    let mut env = Environment::new(cfg, 11).unwrap();
    let mut rng = rng_for(11, 9);
    collect_rollout(agent, &mut env, slots, &mut rng, keep).unwrap()
}

#[test]
fn groups_per_variant() {
    let (a, _) = small_agent(Variant::LdHmoe, 0);
    assert_eq!(a.group_names(), ["temporal", "spatial", "critic"]);
    let (a, _) = small_agent(Variant::PpoMono, 0);
    assert_eq!(a.group_names(), ["shared"]);
    let (a, _) = small_agent(Variant::MoeHomo, 0);
    assert_eq!(a.group_names(), ["moe", "critic"]);
}

#[test]
fn scheduling_update_leaves_spatial_group_untouched() {
    let (mut agent, cfg) = small_agent(Variant::LdHmoe, 1);
    let r = rollout(&mut agent, &cfg, 40, false);
    let before = agent.clone();
    let targets = ppo::targets(&mut agent, &r);
    let mut rng = rng_for(0, 5);
    ppo::scheduling_update(&mut agent, &r, &targets, &mut rng).unwrap();
    assert!(agent.stores[group::SPATIAL].bit_equal(&before.stores[group::SPATIAL]));
    assert!(!agent.stores[group::TEMPORAL].bit_equal(&before.stores[group::TEMPORAL]));
    assert!(!agent.stores[group::CRITIC].bit_equal(&before.stores[group::CRITIC]));
}

#[test]
fn spatial_update_leaves_temporal_group_untouched() {
    let (mut agent, cfg) = small_agent(Variant::LdHmoe, 2);
    agent.config.spatial_init_scale = 1.0;
    let r = rollout(&mut agent, &cfg, 40, false);
    let before = agent.clone();
    let mut rng = rng_for(0, 6);
    ppo::spatial_update(&mut agent, &r, &mut rng).unwrap();
    assert!(agent.stores[group::TEMPORAL].bit_equal(&before.stores[group::TEMPORAL]));
    assert!(agent.stores[group::CRITIC].bit_equal(&before.stores[group::CRITIC]));
    assert!(!agent.stores[group::SPATIAL].bit_equal(&before.stores[group::SPATIAL]));
}

#[test]
fn zero_spatial_weight_freezes_spatial_expert() {
    let (mut agent, cfg) = small_agent(Variant::LdHmoe, 3);
    agent.config.spatial_weight = 0.0;
    let r = rollout(&mut agent, &cfg, 30, false);
    let before = agent.clone();
    let mut rng = rng_for(0, 7);
    ppo::spatial_update(&mut agent, &r, &mut rng).unwrap();
    assert!(agent.stores[group::SPATIAL].bit_equal(&before.stores[group::SPATIAL]));
}

#[test]
fn spatial_ascent_increases_gain_monotonically() {
    let cfg = small_sim();
    let ac = AgentConfig { spatial_hidden: 16, spatial_init_scale: 1.0, ..AgentConfig::default() };
    let mut agent = Agent::new(Variant::LdHmoe, ac, &cfg).unwrap();
    let Nets::Hetero(nets) = agent.nets.clone() else { panic!() };
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|i| {
            let th = -0.6 + 0.15 * i as f64;
            vec![th.sin(), th.cos(), 0.4 + 0.05 * i as f64, 0.0]
        })
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let mut last = ppo::spatial_step(&mut agent, &nets, &refs).unwrap();
    assert!(last < 0.9, "initial gain {last} leaves no room to ascend");
    for step in 0..50 {
        let g = ppo::spatial_step(&mut agent, &nets, &refs).unwrap();
        assert!(g > last, "gain fell at step {step}: {last} -> {g}");
        last = g;
    }
}

#[test]
fn critic_loss_decreases_on_fixed_rollout() {
    let (mut agent, cfg) = small_agent(Variant::LdHmoe, 4);
    let r = rollout(&mut agent, &cfg, 64, false);
    let targets = ppo::targets(&mut agent, &r);
    let mut rng = rng_for(0, 8);
    let first = ppo::scheduling_update(&mut agent, &r, &targets, &mut rng).unwrap().value_loss;
    let mut last = first;
    for _ in 0..200 {
        last = ppo::scheduling_update(&mut agent, &r, &targets, &mut rng).unwrap().value_loss;
    }
    assert!(last < first, "value loss {first} -> {last}");
}

#[test]
fn zero_length_training_returns_untrained_agent() {
    let (mut agent, cfg) = small_agent(Variant::LdHmoe, 5);
    let before = agent.clone();
    let report = train(&mut agent, &cfg, &TrainConfig { episodes: 0, episode_slots: 100, seed: 0 }).unwrap();
    assert!(report.episodes.is_empty());
    assert!(report.diverged.is_none());
    assert!(agent.same_parameters(&before));
}

#[test]
fn training_is_deterministic() {
    for variant in Variant::ALL {
        let tc = TrainConfig { episodes: 2, episode_slots: 30, seed: 3 };
        let (mut a, cfg) = small_agent(variant, 6);
        let (mut b, _) = small_agent(variant, 6);
        let ra = train(&mut a, &cfg, &tc).unwrap();
        let rb = train(&mut b, &cfg, &tc).unwrap();
        assert!(a.same_parameters(&b), "{}", variant.label());
        assert_eq!(ra.episodes, rb.episodes);
    }
}

#[test]
fn single_group_variants_train_all_parameters_jointly() {
    let (mut agent, cfg) = small_agent(Variant::PpoMono, 7);
    let r = rollout(&mut agent, &cfg, 32, false);
    let before = agent.clone();
    let mut rng = rng_for(0, 1);
    ppo::decoupled_update(&mut agent, &r, &mut rng).unwrap();
    let Nets::Mono(nets) = &agent.nets else { panic!() };
    let s = &agent.stores[0];
    let b = &before.stores[0];
    for id in [nets.phase_head.w, nets.logit_head.w, nets.value_head.w] {
        assert_ne!(s.value(id), b.value(id));
    }
}

#[test]
fn stored_rewards_match_the_objective() {
    let (mut agent, cfg) = small_agent(Variant::LdHmoe, 8);
    let r = rollout(&mut agent, &cfg, 60, true);
    assert_eq!(r.decisions.len(), r.transitions.len());
    for ((snap, action), t) in r.decisions.iter().zip(&r.transitions) {
        let expected = edge::reward(snap, action, &cfg).unwrap();
        assert!((expected - t.reward).abs() <= 1e-9 * expected.abs().max(1.0));
    }
}

#[test]
fn actions_satisfy_constraints() {
    for variant in Variant::ALL {
        let (mut agent, cfg) = small_agent(variant, 9);
        agent.explore = true;
        let log = run_episode(&mut agent, &cfg, 2, 50).unwrap();
        assert_eq!(log.records.len(), 100);
        let mut env = Environment::new(&cfg, 4).unwrap();
        let mut rng = rng_for(4, 3);
        for _ in 0..20 {
            let snap = env.begin_slot();
            let obs = agent.observe(&snap, &cfg).unwrap();
            let (raw, _) = agent.act(&obs, &mut rng, true).unwrap();
            let action = agent.to_action(&raw, &obs, &cfg).unwrap();
            assert!(action.f.iter().sum::<f64>() <= cfg.cpu_max * (1.0 + 1e-12));
            let m = cfg.antennas as f64;
            for beam in &action.beams {
                for v in beam.vector() {
                    assert!((v.norm() - 1.0 / m.sqrt()).abs() < 1e-12);
                }
            }
            env.apply(&action).unwrap();
        }
    }
}

#[test]
fn saturated_negative_logit_never_activates() {
    let (mut agent, cfg) = small_agent(Variant::LdHmoe, 10);
    let Nets::Hetero(nets) = agent.nets.clone() else { panic!() };
    let t = &mut agent.stores[group::TEMPORAL];
    t.value_mut(nets.logit_head.w).fill(0.0);
    t.value_mut(nets.logit_head.b).fill(-1e6);
    let mut env = Environment::new(&cfg, 0).unwrap();
    let mut rng = rng_for(0, 2);
    let snap = env.begin_slot();
    let obs = agent.observe(&snap, &cfg).unwrap();
    for _ in 0..2000 {
        let (a, _) = agent.act(&obs, &mut rng, true).unwrap();
        assert!(a.pi.iter().all(|p| !p));
    }
    let (a, _) = agent.act(&obs, &mut rng, false).unwrap();
    assert!(a.pi.iter().all(|p| !p));
}

#[test]
fn checkpoint_round_trip_reproduces_decisions() {
    for variant in Variant::ALL {
        let (mut agent, cfg) = small_agent(variant, 12);
        train(&mut agent, &cfg, &TrainConfig { episodes: 1, episode_slots: 20, seed: 0 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.bin");
        agent.save(&path).unwrap();
        let mut loaded = Agent::load(&path).unwrap();
        assert!(loaded.same_parameters(&agent));
        let a = run_episode(&mut agent, &cfg, 1, 30).unwrap();
        let b = run_episode(&mut loaded, &cfg, 1, 30).unwrap();
        assert_eq!(a.records, b.records);
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let (agent, _) = small_agent(Variant::MoeHomo, 13);
    let mut bytes = agent.to_bytes().unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(Agent::from_bytes(&bytes).is_err());
    assert!(Agent::from_bytes(b"not a checkpoint").is_err());
}

#[test]
fn experts_pass_gradient_check() {
    let (mut agent, cfg) = small_agent(Variant::LdHmoe, 14);
    // Away from the optimum so the spatial gradients are not vanishingly small.
    agent.config.spatial_init_scale = 1.0;
    let agent = Agent::new(Variant::LdHmoe, agent.config.clone(), &cfg).unwrap();
    let Nets::Hetero(nets) = agent.nets.clone() else { panic!() };
    let mut stores = agent.stores.clone();
    let k = agent.vehicles;
    let dt = networks::temporal_dim(k);
    let xs: Vec<Tensor> = (0..3)
        .map(|t| Tensor::from_vec(2, dt, (0..2 * dt).map(|i| ((i * 7 + t * 3) % 11) as f64 / 11.0 - 0.4).collect()).unwrap())
        .collect();
    let hidden = agent.config.temporal_hidden;
    let temporal = grad_check(
        &mut stores,
        |tape: &mut Tape| {
            let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let h = tape.constant(Tensor::filled(2, hidden, 0.1));
            let c = tape.constant(Tensor::filled(2, hidden, -0.2));
            let (heads, h, _) = nets.temporal_sequence(tape, &vars, h, c)?;
            let mut acc = tape.sum(h);
            for hd in heads {
                let a = tape.sigmoid(hd.logits);
                let a = tape.sum(a);
                let b = tape.square(hd.means);
                let b = tape.sum(b);
                let s = tape.sum(hd.log_std);
                acc = tape.add(acc, a)?;
                acc = tape.add(acc, b)?;
                acc = tape.add(acc, s)?;
            }
            Ok(acc)
        },
        1e-6,
        Some(40),
    )
    .unwrap();
    assert!(temporal.passes(1e-4), "{temporal:?}");
    let rows = Tensor::from_vec(3, 4, vec![0.3, 0.95, 0.4, 0.1, -0.5, 0.86, 0.8, 0.0, 0.9, 0.43, 0.2, -0.3]).unwrap();
    let spatial = grad_check(
        &mut stores,
        |tape: &mut Tape| {
            let x = tape.constant(rows.clone());
            let raw = nets.spatial_raw(tape, x)?;
            let g = networks::normalized_gain(tape, raw)?;
            Ok(tape.sum(g))
        },
        1e-6,
        Some(40),
    )
    .unwrap();
    assert!(spatial.passes(1e-4), "{spatial:?}");
}

#[test]
fn recomputed_log_probs_match_behaviour_policy() {
    for variant in Variant::ALL {
        let (mut agent, cfg) = small_agent(variant, 15);
        let r = rollout(&mut agent, &cfg, 37, false);
        let lp = ppo::log_probs(&agent, &r).unwrap();
        for (a, t) in lp.iter().zip(&r.transitions) {
            assert!((a - t.log_prob).abs() < 1e-9, "{}: {a} vs {}", variant.label(), t.log_prob);
        }
    }
}
