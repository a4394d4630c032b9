use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use isac_core::agent::{self, Agent, AgentConfig, TrainConfig, Variant};
use isac_core::harness::{self, PolicySpec, SweepPoint};
use isac_core::policy::Baseline;
use isac_core::{default_config, toy_config, Error, Result, SimConfig};

#[derive(Parser)]
#[command(name = "isac", version, about = "Camera/radar assisted mmWave beam-tracking simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy for one seed and write per-slot records.
    Run(RunArgs),
    /// Seed-averaged steady-state statistics over an SNR grid (dB).
    SweepSnr(SweepArgs),
    /// Seed-averaged statistics over a grid of the Lyapunov weight V.
    SweepV(SweepArgs),
    /// Train a learned scheduler and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a frozen checkpoint over several seeds.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Toy,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file overriding fields of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<SimConfig> {
        let base = match self.preset {
            Preset::Default => default_config(),
            Preset::Toy => toy_config(),
        };
        let Some(path) = &self.config else { return Ok(base) };
        let text = std::fs::read_to_string(path)?;
        // Overrides apply on top of the preset, not the library defaults.
        let mut table: toml::Table = toml::from_str(&base.to_toml_string()).map_err(|e| Error::Parse(e.to_string()))?;
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let antennas_only = overrides.contains_key("antennas") && !overrides.contains_key("beamwidth");
        if antennas_only {
            table.remove("beamwidth");
        }
        table.extend(overrides);
        SimConfig::from_toml_str(&table.to_string())
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// vision-only | radar-only | greedy-dpp | ld-hmoe | ppo-mono | moe-homo
    #[arg(long)]
    policy: String,
    /// Checkpoint for the learned policies.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the configured horizon.
    #[arg(long)]
    slots: Option<usize>,
    /// Output file; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "vision-only,radar-only,greedy-dpp")]
    policies: Vec<String>,
    /// Checkpoint used for any learned policy in `--policies`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of seeds, starting at `--first-seed`.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "ld-hmoe")]
    variant: String,
    #[arg(long, default_value_t = 300)]
    episodes: usize,
    #[arg(long, default_value_t = 500)]
    episode_slots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file overriding agent hyperparameters.
    #[arg(long)]
    agent_config: Option<PathBuf>,
    /// Actor learning rate, applied after `--agent-config`.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-episode learning curve (CSV).
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long)]
    slots: Option<usize>,
    /// Per-slot records of every seed (CSV).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn policy_spec(name: &str, checkpoint: Option<&Path>) -> Result<PolicySpec> {
    if let Some(b) = Baseline::parse(name) {
        return Ok(PolicySpec::baseline(b));
    }
    let variant = Variant::parse(name).ok_or_else(|| Error::Config(format!("unknown policy '{name}'")))?;
    let path = checkpoint.ok_or_else(|| Error::Config(format!("policy '{name}' needs --checkpoint")))?;
    let agent = Agent::load(path)?;
    if agent.variant != variant {
        return Err(Error::Checkpoint(format!("checkpoint holds {}, not {name}", agent.variant.label())));
    }
    Ok(agent.into_policy_spec())
}

fn run(args: RunArgs) -> Result<serde_json::Value> {
    let cfg = args.cfg.resolve()?;
    let spec = policy_spec(&args.policy, args.checkpoint.as_deref())?;
    let mut policy = spec.build()?;
    let slots = args.slots.unwrap_or(cfg.horizon);
    let log = harness::run_episode(policy.as_mut(), &cfg, args.seed, slots)?;
    if args.out.extension().is_some_and(|e| e == "json") {
        harness::write_json(&log.records, &args.out)?;
    } else {
        harness::write_csv(&log.records, &args.out)?;
    }
    let summary = if log.records.is_empty() { None } else { Some(harness::time_averages(&log.records)?) };
    Ok(json!({
        "out": args.out,
        "summary": summary,
        "activation_rate": log.activation_rate(),
        "flagged_slots": log.flagged_slots.len(),
    }))
}

fn sweep(args: SweepArgs, snr: bool) -> Result<serde_json::Value> {
    let cfg = args.cfg.resolve()?;
    let policies =
        args.policies.iter().map(|p| policy_spec(p, args.checkpoint.as_deref())).collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();
    let horizon = args.slots.unwrap_or(cfg.horizon);
    let points: Vec<SweepPoint> = if snr {
        harness::sweep_snr(policies, seeds, horizon, args.grid, &cfg)?
    } else {
        harness::sweep_v(policies, seeds, horizon, args.grid, &cfg)?
    };
    harness::write_sweep_csv(&points, &args.out)?;
    Ok(json!({ "out": args.out, "points": points }))
}

fn train(args: TrainArgs) -> Result<serde_json::Value> {
    let cfg = args.cfg.resolve()?;
    let variant = Variant::parse(&args.variant).ok_or_else(|| Error::Config(format!("unknown variant '{}'", args.variant)))?;
    let mut ac = match &args.agent_config {
        Some(p) => AgentConfig::load(p)?,
        None => AgentConfig::default(),
    };
    if let Some(lr) = args.lr {
        ac.lr = lr;
        ac.validate()?;
    }
    let mut agent = Agent::new(variant, ac, &cfg)?;
    let tc = TrainConfig { episodes: args.episodes, episode_slots: args.episode_slots, seed: args.seed };
    let report = agent::train(&mut agent, &cfg, &tc)?;
    agent.save(&args.checkpoint)?;
    if let Some(curve) = &args.curve {
        agent::write_learning_curve(&report.episodes, curve)?;
    }
    let last = report.episodes.last();
    Ok(json!({
        "checkpoint": args.checkpoint,
        "variant": variant.label(),
        "episodes": report.episodes.len(),
        "parameters": agent.parameter_count(),
        "seconds": report.seconds,
        "diverged": report.diverged,
        "final_episode": last,
    }))
}

fn eval(args: EvalArgs) -> Result<serde_json::Value> {
    let cfg = args.cfg.resolve()?;
    let spec = Agent::load(&args.checkpoint)?.into_policy_spec();
    let horizon = args.slots.unwrap_or(cfg.horizon);
    let mut records = Vec::new();
    let mut runs = Vec::new();
    for seed in args.first_seed..args.first_seed + args.seeds {
        let mut policy = spec.build()?;
        let log = harness::run_episode(policy.as_mut(), &cfg, seed, horizon)?;
        if !log.records.is_empty() {
            let whole = harness::time_averages(&log.records)?;
            let steady = harness::time_averages(harness::tail(&log.records, harness::STEADY_FRACTION))?;
            runs.push(json!({
                "seed": seed,
                "summary": whole,
                "steady_pcrb": steady.avg_pcrb,
                "activation_rate": log.activation_rate(),
            }));
        }
        records.extend(log.records);
    }
    if let Some(out) = &args.out {
        harness::write_csv(&records, out)?;
    }
    Ok(json!({ "policy": spec.name, "runs": runs }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": first, "kind": "usage" }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::SweepSnr(a) => sweep(a, true),
        Command::SweepV(a) => sweep(a, false),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string(), "kind": e.kind() }));
            ExitCode::FAILURE
        }
    }
}
