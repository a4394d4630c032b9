//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::time::Instant;

use isac_core::agent::networks::{self, group, Nets};
use isac_core::agent::{collect_rollout, ppo, train, Agent, AgentConfig, TrainConfig, Variant};
use isac_core::env::Environment;
use isac_core::harness::{
    self, csv_string, linear_fit, per_slot, run_episode, tail, time_averages, ExperimentSpec, PolicySpec, SlotRecord, Sweep,
};
use isac_core::nn::{grad_check, Activation, Dense, Lstm, Mlp, ParamStore, Tensor};
use isac_core::policy::{greedy_dpp, Baseline, Policy};
use isac_core::scenario::rng_for;
use isac_core::{default_config, toy_config, SimConfig};

const LONG_RUN: usize = 20_000;
const SEEDS: u64 = 10;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// The learned scheduler evaluated by criteria 5 to 8, trained once.
struct Trained {
    agent: Agent,
    cfg: SimConfig,
    seconds: f64,
    /// Mean episode reward over the first and last ten training episodes.
    reward_span: (f64, f64),
}

fn train_agent() -> Trained {
    let cfg = toy_config();
    // Desk-scale budget: a faster actor step than the long-run default.
    let ac = AgentConfig { lr: 3e-4, ..AgentConfig::default() };
    let mut agent = Agent::new(Variant::LdHmoe, ac, &cfg).unwrap();
    let report = train(&mut agent, &cfg, &TrainConfig { episodes: 300, episode_slots: 500, seed: 1 }).unwrap();
    assert!(report.diverged.is_none(), "training diverged: {:?}", report.diverged);
    agent.explore = false;
    let rewards: Vec<f64> = report.episodes.iter().map(|e| e.mean_reward).collect();
    let ends = (mean(rewards[..10].iter().copied()), mean(rewards[rewards.len() - 10..].iter().copied()));
    Trained { agent, cfg, seconds: report.seconds, reward_span: ends }
}

fn seeds() -> Vec<u64> {
    (0..SEEDS).collect()
}

fn runs(spec: &PolicySpec, cfg: &SimConfig, slots: usize) -> Vec<Vec<SlotRecord>> {
    seeds()
        .into_iter()
        .map(|s| {
            let mut p = spec.build().unwrap();
            run_episode(p.as_mut(), cfg, s, slots).unwrap().records
        })
        .collect()
}

fn sci(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ")
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn constant_modulus(trained: &Trained) -> Verdict {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    let mut policies: Vec<(Box<dyn Policy>, SimConfig)> = vec![
        (Box::new(Baseline::VisionOnly), default_config()),
        (Box::new(Baseline::RadarOnly), default_config()),
        (Box::new(Baseline::GreedyDpp), default_config()),
        (Box::new(trained.agent.clone()), trained.cfg.clone()),
    ];
    for variant in [Variant::PpoMono, Variant::MoeHomo] {
        let cfg = toy_config();
        let a = Agent::new(variant, AgentConfig { seed: 5, ..AgentConfig::default() }, &cfg).unwrap();
        policies.push((Box::new(a), cfg));
    }
    for (policy, cfg) in &mut policies {
        let mut env = Environment::new(cfg, 21).unwrap();
        let mut rng = rng_for(21, 3);
        let target = 1.0 / (cfg.antennas as f64).sqrt();
        let mut decisions = 0usize;
        let mut policy_worst: f64 = 0.0;
        while decisions < 100_000 {
            let snap = env.begin_slot();
            let d = policy.decide(&snap, cfg, &mut rng).unwrap();
            for beam in &d.action.beams {
                for v in beam.vector() {
                    policy_worst = policy_worst.max((v.norm() - target).abs());
                }
                decisions += 1;
            }
            env.apply(&d.action).unwrap();
        }
        parts.push(format!("{} {decisions}", policy.name()));
        worst = worst.max(policy_worst);
    }
    verdict(worst < 1e-12, format!("max | |v_m| - 1/sqrt(M) | = {worst:.2e} over beam decisions [{}]", parts.join(", ")))
}

fn oracle_equivalence() -> Verdict {
    let started = Instant::now();
    let cfg = common::oracle_config();
    let states = common::random_states(&cfg, 200, 3);
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for snap in &states {
        let greedy = greedy_dpp(snap, &cfg).unwrap();
        let (action, total) = common::brute_force(snap, &cfg);
        let diff = (greedy.diagnostics.total - total).abs();
        worst = worst.max(diff);
        if greedy.action.pi != action.pi || greedy.action.f != action.f || diff > 1e-9 * total.abs().max(1.0) {
            mismatches += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 60.0,
        format!("{mismatches} mismatches over {} states, max objective gap {worst:.1e}, {secs:.1}s", states.len()),
    )
}

fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = rng_for(seed, 8);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_fidelity() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut record = |r: isac_core::nn::GradCheckReport| {
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    };
    for seed in 0..10u64 {
        let mut rng = rng_for(seed, 30);
        for act in [Activation::Identity, Activation::Tanh, Activation::Sigmoid] {
            let mut store = ParamStore::new("dense");
            let layer = Dense::new(&mut store, "d", 5, 3, &mut rng);
            let x = random_input(4, 5, seed);
            let r = grad_check(
                &mut [store],
                |t| {
                    let xv = t.constant(x.clone());
                    let y = layer.forward(t, 0, xv)?;
                    let y = act.apply(t, y);
                    let y = t.square(y);
                    Ok(t.sum(y))
                },
                1e-6,
                None,
            )
            .unwrap();
            record(r);
        }
        let mut store = ParamStore::new("mlp");
        let mlp = Mlp::new(&mut store, "m", &[4, 8, 8, 3], Activation::Tanh, Activation::Identity, &mut rng);
        let x = random_input(3, 4, seed + 10);
        // Weighted log-likelihood: a plain sum of log_softmax has a gradient
        // that cancels to roundoff level.
        let w = random_input(3, 3, seed + 11);
        record(
            grad_check(
                &mut [store],
                |t| {
                    let xv = t.constant(x.clone());
                    let y = mlp.forward(t, 0, xv)?;
                    let y = t.log_softmax(y);
                    let wv = t.constant(w.clone());
                    let y = t.mul(y, wv)?;
                    Ok(t.sum(y))
                },
                1e-6,
                None,
            )
            .unwrap(),
        );
        let mut store = ParamStore::new("lstm");
        let lstm = Lstm::new(&mut store, "l", 3, 6, &mut rng);
        let xs: Vec<Tensor> = (0..4).map(|i| random_input(2, 3, seed * 7 + i)).collect();
        record(
            grad_check(
                &mut [store],
                |t| {
                    let vars = lstm.bind(t, 0);
                    let (mut h, mut c) = lstm.zero_state(t, 2);
                    for x in &xs {
                        let xv = t.constant(x.clone());
                        (h, c) = lstm.step(t, vars, xv, h, c)?;
                    }
                    let s = t.square(h);
                    let s = t.sum(s);
                    let cs = t.sum(c);
                    t.add(s, cs)
                },
                1e-6,
                None,
            )
            .unwrap(),
        );
        let mut store = ParamStore::new("gate");
        let gate = Dense::new(&mut store, "g", 5, 2, &mut rng);
        let x = random_input(3, 5, seed + 20);
        let w = random_input(3, 2, seed + 21);
        record(
            grad_check(
                &mut [store],
                |t| {
                    let xv = t.constant(x.clone());
                    let g = gate.forward(t, 0, xv)?;
                    let g = t.softmax(g);
                    let wv = t.constant(w.clone());
                    let y = t.mul(g, wv)?;
                    Ok(t.sum(y))
                },
                1e-6,
                None,
            )
            .unwrap(),
        );
    }

    // Both experts of a small heterogeneous agent, away from the matched
    // beam so the spatial gradients are well above finite-difference noise.
    let cfg = SimConfig { antennas: 16, beamwidth: 2.0 / 16.0, ..toy_config() };
    let ac = AgentConfig {
        temporal_hidden: 12,
        spatial_hidden: 16,
        critic_hidden: 12,
        spatial_init_scale: 1.0,
        seed: 14,
        ..AgentConfig::default()
    };
    let agent = Agent::new(Variant::LdHmoe, ac, &cfg).unwrap();
    let Nets::Hetero(nets) = agent.nets.clone() else { unreachable!() };
    let mut stores = agent.stores.clone();
    let dt = networks::temporal_dim(cfg.vehicles);
    let xs: Vec<Tensor> = (0..3).map(|i| random_input(2, dt, 40 + i)).collect();
    let hidden = agent.config.temporal_hidden;
    record(
        grad_check(
            &mut stores,
            |t| {
                let vars: Vec<_> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let h = t.constant(Tensor::filled(2, hidden, 0.1));
                let c = t.constant(Tensor::filled(2, hidden, -0.2));
                let (heads, h, _) = nets.temporal_sequence(t, &vars, h, c)?;
                let mut acc = t.sum(h);
                for hd in heads {
                    let a = t.sigmoid(hd.logits);
                    let a = t.sum(a);
                    let b = t.square(hd.means);
                    let b = t.sum(b);
                    let s = t.sum(hd.log_std);
                    acc = t.add(acc, a)?;
                    acc = t.add(acc, b)?;
                    acc = t.add(acc, s)?;
                }
                Ok(acc)
            },
            1e-6,
            Some(60),
        )
        .unwrap(),
    );
    let rows = random_input(3, networks::SPATIAL_FEATURES, 50);
    record(
        grad_check(
            &mut stores,
            |t| {
                let x = t.constant(rows.clone());
                let raw = nets.spatial_raw(t, x)?;
                let g = networks::normalized_gain(t, raw)?;
                Ok(t.sum(g))
            },
            1e-6,
            Some(60),
        )
        .unwrap(),
    );
    verdict(worst < 1e-4, format!("max relative error {worst:.2e} over {checked} parameters"))
}

fn gradient_isolation() -> Verdict {
    let cfg = SimConfig { antennas: 16, beamwidth: 2.0 / 16.0, ..toy_config() };
    let ac = AgentConfig { temporal_hidden: 16, spatial_hidden: 16, critic_hidden: 16, bptt: 8, seed: 2, ..AgentConfig::default() };
    let mut agent = Agent::new(Variant::LdHmoe, ac, &cfg).unwrap();
    let mut env = Environment::new(&cfg, 4).unwrap();
    let mut rng = rng_for(4, 9);
    let rollout = collect_rollout(&mut agent, &mut env, 64, &mut rng, false).unwrap();

    let before = agent.clone();
    let targets = ppo::targets(&mut agent, &rollout);
    ppo::scheduling_update(&mut agent, &rollout, &targets, &mut rng).unwrap();
    let spat_kept = agent.stores[group::SPATIAL].bit_equal(&before.stores[group::SPATIAL]);
    let temp_moved = !agent.stores[group::TEMPORAL].bit_equal(&before.stores[group::TEMPORAL]);

    let before = agent.clone();
    ppo::spatial_update(&mut agent, &rollout, &mut rng).unwrap();
    let temp_kept = agent.stores[group::TEMPORAL].bit_equal(&before.stores[group::TEMPORAL])
        && agent.stores[group::CRITIC].bit_equal(&before.stores[group::CRITIC]);
    let spat_moved = !agent.stores[group::SPATIAL].bit_equal(&before.stores[group::SPATIAL]);
    verdict(
        spat_kept && temp_kept && temp_moved && spat_moved,
        format!(
            "scheduling update: spatial bit-identical={spat_kept}, temporal changed={temp_moved}; \
             spatial update: temporal+critic bit-identical={temp_kept}, spatial changed={spat_moved}"
        ),
    )
}

fn backlog_series(records: &[SlotRecord]) -> Vec<f64> {
    let k = records.iter().map(|r| r.vehicle).max().unwrap() + 1;
    per_slot(records, |r| r.queue).into_iter().map(|q| q / k as f64).collect()
}

fn final_half_queue(records: &[SlotRecord]) -> f64 {
    time_averages(tail(records, 0.5)).unwrap().avg_queue
}

fn queue_stability(vo: &[SlotRecord], greedy: &[SlotRecord], ld: &[Vec<SlotRecord>], ld_cfg: &SimConfig) -> Verdict {
    let cfg = default_config();
    let (slope, r2) = linear_fit(&backlog_series(vo));
    let g = final_half_queue(greedy);
    let per_seed: Vec<f64> = ld.iter().map(|r| final_half_queue(r)).collect();
    let l = mean(per_seed.iter().copied());
    let worst = per_seed.iter().cloned().fold(0.0, f64::max);
    let pass = slope > 0.0 && r2 > 0.99 && g < 2.0 * cfg.task_cycles && l < 2.0 * ld_cfg.task_cycles;
    verdict(
        pass,
        format!(
            "vision-only slope {slope:.3e} cycles/slot R^2 {r2:.4}; final-half backlog greedy-dpp {g:.3e}, \
             ld-hmoe {l:.3e} (worst seed {worst:.3e}) vs 2C = {:.1e}",
            2.0 * cfg.task_cycles
        ),
    )
}

/// Largest `Z(n) / n` over the final quarter of a run.
fn final_quarter_z_rate(records: &[SlotRecord]) -> f64 {
    tail(records, 0.25).iter().map(|r| r.z / (r.slot + 1) as f64).fold(0.0, f64::max)
}

fn energy_budget(vo: &[SlotRecord], greedy: &[SlotRecord], ld: &[Vec<SlotRecord>], ld_cfg: &SimConfig) -> Verdict {
    let cfg = default_config();
    let vo_e = time_averages(vo).unwrap().avg_energy;
    let g_e = time_averages(tail(greedy, 0.5)).unwrap().avg_energy;
    let g_z = final_quarter_z_rate(greedy);
    let l_e = mean(ld.iter().map(|r| time_averages(tail(r, 0.5)).unwrap().avg_energy));
    let l_z = ld.iter().map(|r| final_quarter_z_rate(r)).fold(0.0, f64::max);
    let pass = g_e <= 1.05 * cfg.energy_budget
        && g_z < 0.01 * cfg.energy_budget
        && l_e <= 1.05 * ld_cfg.energy_budget
        && l_z < 0.01 * ld_cfg.energy_budget
        && vo_e > cfg.energy_budget;
    verdict(
        pass,
        format!(
            "greedy-dpp E {g_e:.2} J (budget {}), Z/n {g_z:.4}; ld-hmoe E {l_e:.2} J (budget {}), Z/n {l_z:.4}; vision-only E {vo_e:.2} J",
            cfg.energy_budget, ld_cfg.energy_budget
        ),
    )
}

fn steady(records: &[Vec<SlotRecord>]) -> f64 {
    mean(records.iter().map(|r| time_averages(tail(r, harness::STEADY_FRACTION)).unwrap().avg_pcrb))
}

fn pcrb_ordering(trained: &Trained, ld: &[Vec<SlotRecord>]) -> Verdict {
    let cfg = &trained.cfg;
    let ro = steady(&runs(&PolicySpec::baseline(Baseline::RadarOnly), cfg, LONG_RUN));
    let vo = steady(&runs(&PolicySpec::baseline(Baseline::VisionOnly), cfg, LONG_RUN));
    let g = steady(&runs(&PolicySpec::baseline(Baseline::GreedyDpp), cfg, LONG_RUN));
    let l = steady(ld);
    let pass = ro >= 2.0 * l && ro >= 2.0 * g && l <= 1.5 * vo && trained.seconds <= 1800.0;
    verdict(
        pass,
        format!(
            "steady PCRB radar-only {ro:.3e}, greedy-dpp {g:.3e}, ld-hmoe {l:.3e} ({:.2}x vision-only {vo:.3e}); training {:.0}s, episode reward {:.1} -> {:.1}",
            l / vo,
            trained.seconds,
            trained.reward_span.0,
            trained.reward_span.1
        ),
    )
}

fn snr_points(policies: Vec<PolicySpec>, cfg: &SimConfig, grid: Vec<f64>, seeds: u64) -> Vec<harness::SweepPoint> {
    let spec = ExperimentSpec { policies, seeds: (0..seeds).collect(), horizon: LONG_RUN, sweep: Sweep::Snr(grid) };
    harness::run_experiment(&spec, cfg).unwrap()
}

fn snr_robustness(trained: &Trained) -> Verdict {
    let grid = vec![0.0, 5.0, 10.0, 15.0, 20.0];
    let cfg = default_config();
    let base = snr_points(
        vec![PolicySpec::baseline(Baseline::RadarOnly), PolicySpec::baseline(Baseline::VisionOnly)],
        &cfg,
        grid.clone(),
        3,
    );
    let ro: Vec<f64> = base.iter().filter(|p| p.policy == "radar-only").map(|p| p.steady_pcrb).collect();
    let vo: Vec<f64> = base.iter().filter(|p| p.policy == "vision-only").map(|p| p.steady_pcrb).collect();
    let ro_monotone = ro.windows(2).all(|w| w[1] <= w[0]);
    let vo_min = vo.iter().cloned().fold(f64::INFINITY, f64::min);
    let vo_max = vo.iter().cloned().fold(0.0, f64::max);
    let vo_spread = (vo_max - vo_min) / vo_min;

    let ends = vec![0.0, 20.0];
    // Paired seeds at both ends of the grid.
    let g = snr_points(vec![PolicySpec::baseline(Baseline::GreedyDpp)], &cfg, ends.clone(), SEEDS);
    let l = snr_points(vec![trained.agent.clone().into_policy_spec()], &trained.cfg, ends, SEEDS);
    let (g0, g20) = (g[0].activation_rate, g[1].activation_rate);
    let (l0, l20) = (l[0].activation_rate, l[1].activation_rate);
    let pass = ro_monotone && vo_spread < 0.10 && g20 < g0 && l20 < l0;
    verdict(
        pass,
        format!(
            "radar-only steady PCRB over 0..20 dB [{}]; vision-only spread {:.1}%; activation 0 dB -> 20 dB: \
             greedy-dpp {g0:.4} -> {g20:.4}, ld-hmoe {l0:.4} -> {l20:.4}",
            sci(&ro),
            100.0 * vo_spread
        ),
    )
}

fn lyapunov_tradeoff() -> Verdict {
    let spec = ExperimentSpec {
        policies: vec![PolicySpec::baseline(Baseline::GreedyDpp)],
        seeds: (0..3).collect(),
        horizon: LONG_RUN,
        sweep: Sweep::V(vec![1.0, 10.0, 100.0]),
    };
    let pts = harness::run_experiment(&spec, &default_config()).unwrap();
    let pcrb: Vec<f64> = pts.iter().map(|p| p.avg_pcrb).collect();
    let queue: Vec<f64> = pts.iter().map(|p| p.avg_queue).collect();
    let pass = pcrb.windows(2).all(|w| w[1] <= w[0]) && queue.windows(2).all(|w| w[1] >= w[0]);
    verdict(pass, format!("V = 1, 10, 100: avg PCRB [{}], avg backlog [{}]", sci(&pcrb), sci(&queue)))
}

fn determinism(trained: &Trained) -> Verdict {
    let mut specs: Vec<(PolicySpec, SimConfig)> = [Baseline::VisionOnly, Baseline::RadarOnly, Baseline::GreedyDpp]
        .into_iter()
        .map(|b| (PolicySpec::baseline(b), default_config()))
        .collect();
    specs.push((trained.agent.clone().into_policy_spec(), trained.cfg.clone()));
    let mut identical = 0;
    for (spec, cfg) in &specs {
        let csv = || {
            let mut p = spec.build().unwrap();
            csv_string(&run_episode(p.as_mut(), cfg, 9, 2_000).unwrap().records).unwrap()
        };
        if csv() == csv() {
            identical += 1;
        }
    }
    verdict(identical == specs.len(), format!("{identical}/{} policies reproduce byte-identical CSV", specs.len()))
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, Verdict)> = Vec::new();
    let mut report = |id: usize, v: Verdict| {
        println!("criterion {id}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, v));
    };

    let trained = train_agent();
    let cfg = default_config();
    let vo = run_episode(&mut Baseline::VisionOnly, &cfg, 0, LONG_RUN).unwrap().records;
    let greedy = run_episode(&mut Baseline::GreedyDpp, &cfg, 0, LONG_RUN).unwrap().records;
    let ld = runs(&trained.agent.clone().into_policy_spec(), &trained.cfg, LONG_RUN);

    report(1, constant_modulus(&trained));
    report(2, oracle_equivalence());
    report(3, gradient_fidelity());
    report(4, gradient_isolation());
    report(5, queue_stability(&vo, &greedy, &ld, &trained.cfg));
    report(6, energy_budget(&vo, &greedy, &ld, &trained.cfg));
    report(7, pcrb_ordering(&trained, &ld));
    report(8, snr_robustness(&trained));
    report(9, lyapunov_tradeoff());
    report(10, determinism(&trained));

    let failed: Vec<usize> = results.iter().filter(|(_, v)| !v.pass).map(|(i, _)| *i).collect();
    println!("acceptance: {}/{} passed in {:.0}s", results.len() - failed.len(), results.len(), started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
