//! Episode runner, Monte Carlo sweeps, aggregation and persistence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{streams, Environment};
use crate::error::{Error, Result};
use crate::policy::{Baseline, Policy};
use crate::scenario::{db_to_linear, rng_for, SimConfig};

/// One (slot, vehicle) row of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: usize,
    pub vehicle: usize,
    pub policy: String,
    pub seed: u64,
    /// Angular PCRB after the slot (rad^2).
    pub pcrb: f64,
    /// This vehicle's share of the slot energy (J).
    pub energy: f64,
    /// Backlog after the slot (cycles).
    pub queue: f64,
    /// Camera information age after the slot (slots).
    pub aoi_tan: u64,
    /// Deficit queue after the slot (J).
    pub z: f64,
    pub p_misa: f64,
    /// System reward of the slot, repeated on every vehicle's row.
    pub reward: f64,
}

pub const CSV_HEADER: [&str; 11] =
    ["slot", "vehicle", "policy", "seed", "pcrb", "energy", "queue", "aoi_tan", "z", "p_misa", "reward"];

#[derive(Clone, Debug, Default)]
pub struct EpisodeLog {
    pub records: Vec<SlotRecord>,
    /// Camera activations, slot-major like `records`.
    pub activations: Vec<bool>,
    /// Slots where a PCRB saturated or a range was clamped.
    pub flagged_slots: Vec<usize>,
    /// Energy ledger total at the end of the run (J).
    pub cumulative_energy: f64,
}

impl EpisodeLog {
    pub fn activation_rate(&self) -> f64 {
        if self.activations.is_empty() {
            return 0.0;
        }
        self.activations.iter().filter(|a| **a).count() as f64 / self.activations.len() as f64
    }
}

/// Rolls `slots` slots of `policy` from a fresh environment.
pub fn run_episode(policy: &mut dyn Policy, cfg: &SimConfig, seed: u64, slots: usize) -> Result<EpisodeLog> {
    let mut env = Environment::new(cfg, seed)?;
    let mut rng = rng_for(seed, streams::POLICY);
    policy.reset();
    let name = policy.name().to_string();
    let k = cfg.vehicles;
    let mut log = EpisodeLog {
        records: Vec::with_capacity(slots * k),
        activations: Vec::with_capacity(slots * k),
        ..EpisodeLog::default()
    };
    for slot in 0..slots {
        let snap = env.begin_slot();
        let decision = policy.decide(&snap, cfg, &mut rng).map_err(|e| infeasible(slot, e))?;
        let out = env.apply(&decision.action).map_err(|e| infeasible(slot, e))?;
        let mut flagged = false;
        for v in 0..k {
            let o = &out.breakdown.outcomes[v];
            flagged |= o.pcrb.saturated || out.clamped[v];
            log.records.push(SlotRecord {
                slot,
                vehicle: v,
                policy: name.clone(),
                seed,
                pcrb: o.pcrb.value,
                energy: out.energy[v],
                queue: out.backlog[v],
                aoi_tan: out.aoi[v].a_tan,
                z: out.z,
                p_misa: o.p_misa,
                reward: out.reward,
            });
            log.activations.push(out.pi[v]);
        }
        if flagged {
            log.flagged_slots.push(slot);
        }
    }
    log.cumulative_energy = env.ledger.cumulative;
    Ok(log)
}

fn infeasible(slot: usize, e: Error) -> Error {
    match e {
        Error::Constraint(reason) | Error::Shape(reason) | Error::NonFinite(reason) => Error::Infeasible { slot, reason },
        other => other,
    }
}

/// Time averages over slots and vehicles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub slots: usize,
    /// Mean PCRB per vehicle-slot (rad^2).
    pub avg_pcrb: f64,
    /// Mean system energy per slot (J).
    pub avg_energy: f64,
    /// Mean backlog per vehicle-slot (cycles).
    pub avg_queue: f64,
    pub avg_aoi: f64,
    pub avg_reward: f64,
    pub final_z: f64,
}

/// Aggregates records of a single run. Records must be slot-major.
pub fn time_averages(records: &[SlotRecord]) -> Result<Summary> {
    let first = records.first().ok_or_else(|| Error::Domain("no records to average".into()))?;
    let last = records.last().expect("non-empty");
    let n = records.len() as f64;
    let slots = last.slot - first.slot + 1;
    let vehicles = records.len() / slots;
    let mean = |f: &dyn Fn(&SlotRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(Summary {
        policy: first.policy.clone(),
        slots,
        avg_pcrb: mean(&|r| r.pcrb),
        avg_energy: records.iter().map(|r| r.energy).sum::<f64>() / slots as f64,
        avg_queue: mean(&|r| r.queue),
        avg_aoi: mean(&|r| r.aoi_tan as f64),
        avg_reward: records.iter().step_by(vehicles.max(1)).map(|r| r.reward).sum::<f64>() / slots as f64,
        final_z: last.z,
    })
}

/// Records of the final `fraction` of slots.
pub fn tail(records: &[SlotRecord], fraction: f64) -> &[SlotRecord] {
    let Some(last) = records.last() else { return records };
    let slots = last.slot + 1;
    let start = slots - ((slots as f64 * fraction).round() as usize).clamp(1, slots);
    let idx = records.partition_point(|r| r.slot < start);
    &records[idx..]
}

/// Running mean `x_1..x_n -> (x_1 + .. + x_i) / i`.
pub fn cumulative_means(values: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            acc / (i + 1) as f64
        })
        .collect()
}

/// Per-slot sums over vehicles of one record field.
pub fn per_slot<F: Fn(&SlotRecord) -> f64>(records: &[SlotRecord], field: F) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    let mut current = usize::MAX;
    for r in records {
        if r.slot != current {
            out.push(0.0);
            current = r.slot;
        }
        *out.last_mut().expect("pushed") += field(r);
    }
    out
}

/// Least-squares line through `(i, y_i)`: returns `(slope, r_squared)`.
pub fn linear_fit(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        let dy = v - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv(records: &[SlotRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    write_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}

/// CSV text of a record set.
pub fn csv_string(records: &[SlotRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write_records(&mut w, records)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

fn write_records<W: Write>(w: &mut csv::Writer<W>, records: &[SlotRecord]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.slot.to_string(),
            r.vehicle.to_string(),
            r.policy.clone(),
            r.seed.to_string(),
            fmt_f64(r.pcrb),
            fmt_f64(r.energy),
            fmt_f64(r.queue),
            r.aoi_tan.to_string(),
            fmt_f64(r.z),
            fmt_f64(r.p_misa),
            fmt_f64(r.reward),
        ])
        .map_err(csv_err)?;
    }
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<SlotRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    let header = r.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Parse(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        let field = |i: usize| row.get(i).ok_or_else(|| Error::Parse(format!("missing column {}", CSV_HEADER[i])));
        let num = |i: usize| -> Result<f64> {
            field(i)?.parse::<f64>().map_err(|e| Error::Parse(format!("{}: {e}", CSV_HEADER[i])))
        };
        let int = |i: usize| -> Result<u64> {
            field(i)?.parse::<u64>().map_err(|e| Error::Parse(format!("{}: {e}", CSV_HEADER[i])))
        };
        out.push(SlotRecord {
            slot: int(0)? as usize,
            vehicle: int(1)? as usize,
            policy: field(2)?.to_string(),
            seed: int(3)?,
            pcrb: num(4)?,
            energy: num(5)?,
            queue: num(6)?,
            aoi_tan: int(7)?,
            z: num(8)?,
            p_misa: num(9)?,
            reward: num(10)?,
        });
    }
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Parse(e.to_string()))?;
    w.flush()?;
    Ok(())
}

pub fn read_json_records(path: &Path) -> Result<Vec<SlotRecord>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
}

type PolicyFactory = dyn Fn() -> Result<Box<dyn Policy>> + Send + Sync;

/// Named constructor of fresh policy instances, so that each Monte Carlo run
/// owns its own policy state.
#[derive(Clone)]
pub struct PolicySpec {
    pub name: String,
    factory: Arc<PolicyFactory>,
}

impl std::fmt::Debug for PolicySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicySpec").field("name", &self.name).finish()
    }
}

impl PolicySpec {
    pub fn new<F>(name: &str, factory: F) -> Self
    where
        F: Fn() -> Result<Box<dyn Policy>> + Send + Sync + 'static,
    {
        PolicySpec { name: name.to_string(), factory: Arc::new(factory) }
    }

    pub fn baseline(b: Baseline) -> Self {
        PolicySpec::new(b.label(), move || Ok(Box::new(b) as Box<dyn Policy>))
    }

    pub fn build(&self) -> Result<Box<dyn Policy>> {
        (self.factory)()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    None,
    Snr(Vec<f64>),
    V(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub policies: Vec<PolicySpec>,
    pub seeds: Vec<u64>,
    pub horizon: usize,
    pub sweep: Sweep,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one policy and one seed".into()));
        }
        match &self.sweep {
            Sweep::Snr(g) | Sweep::V(g) if g.is_empty() => Err(Error::Config("sweep grid is empty".into())),
            Sweep::Snr(g) if g.iter().any(|s| !(-10.0..=40.0).contains(s)) => {
                Err(Error::Config("SNR grid must lie within [-10, 40] dB".into()))
            }
            Sweep::V(g) if g.iter().any(|v| !(*v >= 0.0)) => Err(Error::Config("V grid must be non-negative".into())),
            _ => Ok(()),
        }
    }
}

/// Seed-averaged statistics of one (policy, grid value) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub policy: String,
    /// SNR in dB or V, depending on the sweep; NaN for no sweep.
    pub value: f64,
    pub seeds: usize,
    /// Mean over seeds of the steady-state (final quarter) PCRB.
    pub steady_pcrb: f64,
    pub steady_pcrb_std: f64,
    /// Mean over seeds of the whole-run PCRB.
    pub avg_pcrb: f64,
    pub avg_queue: f64,
    pub avg_energy: f64,
    pub activation_rate: f64,
}

/// Fraction of slots treated as steady state.
pub const STEADY_FRACTION: f64 = 0.25;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

struct RunStats {
    steady_pcrb: f64,
    summary: Summary,
    activation_rate: f64,
}

fn run_stats(spec: &PolicySpec, cfg: &SimConfig, seed: u64, horizon: usize) -> Result<RunStats> {
    let mut policy = spec.build()?;
    let log = run_episode(policy.as_mut(), cfg, seed, horizon)?;
    let summary = time_averages(&log.records)?;
    let steady = time_averages(tail(&log.records, STEADY_FRACTION))?;
    Ok(RunStats { steady_pcrb: steady.avg_pcrb, summary, activation_rate: log.activation_rate() })
}

/// Runs every (policy, grid value, seed) combination in parallel and
/// aggregates over seeds; output order is policy-major, then grid order.
pub fn run_experiment(spec: &ExperimentSpec, cfg: &SimConfig) -> Result<Vec<SweepPoint>> {
    spec.validate()?;
    let grid: Vec<(f64, SimConfig)> = match &spec.sweep {
        Sweep::None => vec![(f64::NAN, cfg.clone())],
        Sweep::Snr(g) => g.iter().map(|&db| (db, SimConfig { snr_linear: db_to_linear(db), ..cfg.clone() })).collect(),
        Sweep::V(g) => g.iter().map(|&v| (v, SimConfig { lyapunov_v: v, ..cfg.clone() })).collect(),
    };
    let mut jobs = Vec::new();
    for (p, policy) in spec.policies.iter().enumerate() {
        for (g, (_, c)) in grid.iter().enumerate() {
            for &seed in &spec.seeds {
                jobs.push((p, g, policy, c, seed));
            }
        }
    }
    let stats: Vec<Result<RunStats>> =
        jobs.par_iter().map(|(_, _, policy, c, seed)| run_stats(policy, c, *seed, spec.horizon)).collect();
    let stats = stats.into_iter().collect::<Result<Vec<_>>>()?;
    let per_point = spec.seeds.len();
    let mut out = Vec::new();
    for (chunk, job) in stats.chunks(per_point).zip(jobs.chunks(per_point)) {
        let (p, g, ..) = job[0];
        let pcrb: Vec<f64> = chunk.iter().map(|s| s.steady_pcrb).collect();
        let (steady_pcrb, steady_pcrb_std) = mean_std(&pcrb);
        let avg = |f: &dyn Fn(&RunStats) -> f64| chunk.iter().map(f).sum::<f64>() / per_point as f64;
        out.push(SweepPoint {
            policy: spec.policies[p].name.clone(),
            value: grid[g].0,
            seeds: per_point,
            steady_pcrb,
            steady_pcrb_std,
            avg_pcrb: avg(&|s| s.summary.avg_pcrb),
            avg_queue: avg(&|s| s.summary.avg_queue),
            avg_energy: avg(&|s| s.summary.avg_energy),
            activation_rate: avg(&|s| s.activation_rate),
        });
    }
    Ok(out)
}

pub fn sweep_snr(policies: Vec<PolicySpec>, seeds: Vec<u64>, horizon: usize, grid_db: Vec<f64>, cfg: &SimConfig) -> Result<Vec<SweepPoint>> {
    run_experiment(&ExperimentSpec { policies, seeds, horizon, sweep: Sweep::Snr(grid_db) }, cfg)
}

pub fn sweep_v(policies: Vec<PolicySpec>, seeds: Vec<u64>, horizon: usize, grid: Vec<f64>, cfg: &SimConfig) -> Result<Vec<SweepPoint>> {
    run_experiment(&ExperimentSpec { policies, seeds, horizon, sweep: Sweep::V(grid) }, cfg)
}

/// CSV of sweep points.
pub fn write_sweep_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record([
        "policy",
        "value",
        "seeds",
        "steady_pcrb",
        "steady_pcrb_std",
        "avg_pcrb",
        "avg_queue",
        "avg_energy",
        "activation_rate",
    ])
    .map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.policy.clone(),
            fmt_f64(p.value),
            p.seeds.to_string(),
            fmt_f64(p.steady_pcrb),
            fmt_f64(p.steady_pcrb_std),
            fmt_f64(p.avg_pcrb),
            fmt_f64(p.avg_queue),
            fmt_f64(p.avg_energy),
            fmt_f64(p.activation_rate),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
