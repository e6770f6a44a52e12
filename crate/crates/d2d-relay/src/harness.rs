//! Monte Carlo experiments: spec files, per-drop simulation, aggregation and
//! CSV / JSON output.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{solve, solve_nominal, AllocationProblem, SolverOptions};
use crate::baselines::{oracle_solve, rate_gain, solve_reference, ORACLE_MAX_RBS, ORACLE_MAX_UES};
use crate::chance::{chance_provider, table3_params, DistributionFamily, TradeoffConfig};
use crate::error::{Error, Result};
use crate::robustness::{robust_provider, ProtectionNorm, UncertaintyModel};
use crate::topology::{generate_topology, realize_channels, relay_problem, RelayUser, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Nominal,
    Robust,
    Chance,
    Reference,
    Oracle,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Nominal => "nominal",
            Mode::Robust => "robust",
            Mode::Chance => "chance",
            Mode::Reference => "reference",
            Mode::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Mode::Nominal, Mode::Robust, Mode::Chance, Mode::Reference, Mode::Oracle]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// A number or one value per RB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerRb {
    Scalar(f64),
    List(Vec<f64>),
}

impl PerRb {
    pub fn expand(&self, num_rbs: usize, name: &str) -> Result<Vec<f64>> {
        match self {
            PerRb::Scalar(v) => Ok(vec![*v; num_rbs]),
            PerRb::List(v) if v.len() == num_rbs => Ok(v.clone()),
            PerRb::List(v) => Err(Error::Config(format!(
                "{name} has {} entries for {num_rbs} RBs",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NormOrder {
    Alpha(f64),
    Named(String),
}

impl NormOrder {
    pub fn to_norm(&self) -> Result<ProtectionNorm> {
        match self {
            NormOrder::Named(s) if s == "linearized" => Ok(ProtectionNorm::Linearized),
            NormOrder::Alpha(a) if *a >= 2.0 && a.is_finite() => Ok(ProtectionNorm::Dual { alpha: *a }),
            other => Err(Error::Config(format!("norm-order must be \"linearized\" or >= 2, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct UncertaintySpec {
    pub psi1: f64,
    pub psi2: f64,
    pub upsilon: f64,
    pub norm_order: NormOrder,
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        UncertaintySpec {
            psi1: 0.2,
            psi2: 0.2,
            upsilon: 0.2,
            norm_order: NormOrder::Named("linearized".into()),
        }
    }
}

impl UncertaintySpec {
    pub fn model(&self, num_ues: usize, num_rbs: usize) -> Result<UncertaintyModel> {
        let m = UncertaintyModel::uniform(num_ues, num_rbs, self.psi1, self.psi2, self.upsilon)
            .with_norm(self.norm_order.to_norm()?);
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TradeoffSpec {
    pub theta1: PerRb,
    pub theta2: PerRb,
    pub ghat_fraction: f64,
    pub distribution_family: DistributionFamily,
}

impl Default for TradeoffSpec {
    fn default() -> Self {
        TradeoffSpec {
            theta1: PerRb::Scalar(0.2),
            theta2: PerRb::Scalar(0.2),
            ghat_fraction: 0.2,
            distribution_family: DistributionFamily::UnimodalSymmetric,
        }
    }
}

impl TradeoffSpec {
    pub fn config(&self, problem: &AllocationProblem) -> Result<TradeoffConfig> {
        let n = problem.num_rbs();
        if !(self.ghat_fraction >= 0.0) || !self.ghat_fraction.is_finite() {
            return Err(Error::Config("ghat-fraction must be non-negative".into()));
        }
        let t = TradeoffConfig::from_fraction(
            problem,
            self.theta1.expand(n, "theta1")?,
            self.theta2.expand(n, "theta2")?,
            self.ghat_fraction,
        );
        t.validate(problem.num_ues(), n).map_err(|e| Error::Config(e.to_string()))?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    D2dPairDistance,
    D2dRingRadius,
    NumD2dPairs,
    Theta,
    Psi,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::D2dPairDistance => "d2d_pair_distance",
            SweepVariable::D2dRingRadius => "d2d_ring_radius",
            SweepVariable::NumD2dPairs => "num_d2d_pairs",
            SweepVariable::Theta => "theta",
            SweepVariable::Psi => "psi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub num_drops: usize,
    pub master_seed: u64,
    pub scenario: ScenarioConfig,
    pub uncertainty: UncertaintySpec,
    pub tradeoff: TradeoffSpec,
    pub solver: SolverOptions,
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            mode: Mode::Nominal,
            num_drops: 25,
            master_seed: 1,
            scenario: ScenarioConfig::default(),
            uncertainty: UncertaintySpec::default(),
            tradeoff: TradeoffSpec::default(),
            solver: SolverOptions::default(),
            sweep: None,
        }
    }
}

fn keys_of<T: Serialize>(value: &T) -> BTreeSet<String> {
    toml::Table::try_from(value)
        .map(|t| t.keys().cloned().collect())
        .unwrap_or_default()
}

fn take_group<T: serde::de::DeserializeOwned>(table: &mut toml::Table, keys: &BTreeSet<String>) -> Result<T> {
    let mut group = toml::Table::new();
    for k in keys {
        if let Some(v) = table.remove(k) {
            group.insert(k.clone(), v);
        }
    }
    group.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

impl ExperimentSpec {
    /// Parse a spec file: flat keys plus an optional `[sweep]` table.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut spec = ExperimentSpec::default();
        let field = |t: &mut toml::Table, k: &str| t.remove(k);
        if let Some(v) = field(&mut table, "mode") {
            let s = v.as_str().ok_or_else(|| Error::Config("mode must be a string".into()))?;
            spec.mode = s.parse()?;
        }
        if let Some(v) = field(&mut table, "num_drops") {
            let n = v.as_integer().filter(|n| *n >= 1).ok_or_else(|| Error::Config("num_drops must be a positive integer".into()))?;
            spec.num_drops = n as usize;
        }
        if let Some(v) = field(&mut table, "master_seed") {
            let n = v.as_integer().filter(|n| *n >= 0).ok_or_else(|| Error::Config("master_seed must be a non-negative integer".into()))?;
            spec.master_seed = n as u64;
        }
        if let Some(v) = field(&mut table, "sweep") {
            spec.sweep = Some(v.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?);
        }
        let defaults = ExperimentSpec::default();
        let mut scenario_keys = keys_of(&defaults.scenario);
        scenario_keys.remove("rng_seed");
        spec.scenario = take_group(&mut table, &scenario_keys)?;
        spec.uncertainty = take_group(&mut table, &keys_of(&defaults.uncertainty))?;
        spec.tradeoff = take_group(&mut table, &keys_of(&defaults.tradeoff))?;
        spec.solver = take_group(&mut table, &keys_of(&defaults.solver))?;
        if let Some(k) = table.keys().next() {
            return Err(Error::Config(format!("unknown key '{k}'")));
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that must pass before any drop runs.
    pub fn validate(&self) -> Result<()> {
        if self.num_drops == 0 {
            return Err(Error::Config("num_drops must be at least 1".into()));
        }
        self.solver.validate()?;
        if let Some(sw) = &self.sweep {
            if sw.values.windows(2).any(|w| !(w[0] < w[1])) || sw.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("sweep values must be finite and strictly increasing".into()));
            }
        }
        for point in self.points()? {
            point.scenario.validate()?;
            point.uncertainty.norm_order.to_norm()?;
            if point.mode == Mode::Chance {
                for t in [&point.tradeoff.theta1, &point.tradeoff.theta2] {
                    let v = t.expand(point.scenario.num_rbs, "theta")?;
                    if v.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                        return Err(Error::Config("theta must lie in (0, 1)".into()));
                    }
                }
            }
            if point.mode == Mode::Oracle {
                let sc = &point.scenario;
                let per_relay = sc.num_cues.div_ceil(sc.num_relays) + sc.num_d2d_pairs.div_ceil(sc.num_relays);
                if sc.num_rbs > ORACLE_MAX_RBS || per_relay > ORACLE_MAX_UES {
                    return Err(Error::TooLarge(format!(
                        "oracle mode needs <= {ORACLE_MAX_RBS} RBs and <= {ORACLE_MAX_UES} users per relay"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The spec at each sweep value; a single point without a sweep.
    pub fn points(&self) -> Result<Vec<ExperimentSpec>> {
        let Some(sw) = &self.sweep else {
            return Ok(vec![self.clone()]);
        };
        sw.values
            .iter()
            .map(|&v| {
                let mut p = self.clone();
                match sw.variable {
                    SweepVariable::D2dPairDistance => p.scenario.d2d_pair_distance_m = v,
                    SweepVariable::D2dRingRadius => p.scenario.d2d_ring_radius_m = v,
                    SweepVariable::NumD2dPairs => {
                        if v < 0.0 || v.fract() != 0.0 {
                            return Err(Error::Config(format!("num_d2d_pairs sweep value {v}")));
                        }
                        p.scenario.num_d2d_pairs = v as usize;
                    }
                    SweepVariable::Theta => {
                        p.tradeoff.theta1 = PerRb::Scalar(v);
                        p.tradeoff.theta2 = PerRb::Scalar(v);
                    }
                    SweepVariable::Psi => {
                        p.uncertainty.psi1 = v;
                        p.uncertainty.psi2 = v;
                    }
                }
                Ok(p)
            })
            .collect()
    }
}

/// Seed of drop `k`, shared by every mode and sweep value.
pub fn drop_seed(master_seed: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(k as u64);
    rng.next_u64()
}

/// Everything measured on one drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub drop: usize,
    pub seed: u64,
    pub sum_rate: f64,
    pub nominal_sum_rate: f64,
    /// Rate of every relay user (CUEs and D2D pairs).
    pub user_rates: Vec<f64>,
    pub d2d_rates: Vec<f64>,
    pub ref_d2d_rates: Vec<f64>,
    /// Iterations of each relay's solve.
    pub iterations: Vec<usize>,
    pub converged: bool,
    pub infeasible: bool,
}

struct RelayOutcome {
    sum_rate: f64,
    rates: Vec<f64>,
    iterations: usize,
    converged: bool,
    infeasible: bool,
}

fn solve_relay(spec: &ExperimentSpec, problem: &AllocationProblem) -> Result<RelayOutcome> {
    let (u, n) = (problem.num_ues(), problem.num_rbs());
    let opts = &spec.solver;
    let solved = match spec.mode {
        Mode::Nominal | Mode::Reference => solve_nominal(problem, opts)?,
        Mode::Robust => solve(problem, robust_provider(&spec.uncertainty.model(u, n)?, problem)?, opts)?,
        Mode::Chance => {
            let tr = spec.tradeoff.config(problem)?;
            let params = vec![table3_params(spec.tradeoff.distribution_family); u];
            let model = spec.uncertainty.model(u, n)?;
            solve(problem, chance_provider(&tr, &params, &model, problem)?, opts)?
        }
        Mode::Oracle => {
            let o = oracle_solve(problem, &crate::allocator::NominalProvider)?;
            return Ok(RelayOutcome {
                sum_rate: o.sum_rate,
                rates: o.solution.rate,
                iterations: 1,
                converged: true,
                infeasible: !o.feasible,
            });
        }
    };
    let s = solved.solution;
    Ok(RelayOutcome {
        sum_rate: s.sum_rate,
        rates: s.rate,
        iterations: s.iterations,
        converged: s.converged,
        infeasible: s.infeasible,
    })
}

/// Topology, channels and per-relay problems of drop `k`.
pub fn drop_instance(
    scenario: &ScenarioConfig,
    master_seed: u64,
    k: usize,
) -> Result<(crate::topology::NetworkTopology, crate::topology::ChannelRealization, ScenarioConfig)> {
    let seed = drop_seed(master_seed, k);
    let cfg = ScenarioConfig {
        rng_seed: seed,
        ..scenario.clone()
    };
    let topology = generate_topology(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let channels = realize_channels(&topology, &cfg, &mut rng, true)?;
    Ok((topology, channels, cfg))
}

/// Per-relay problems of drop `k`, relay index ascending.
pub fn drop_problems(scenario: &ScenarioConfig, master_seed: u64, k: usize) -> Result<Vec<AllocationProblem>> {
    let (topology, channels, cfg) = drop_instance(scenario, master_seed, k)?;
    Ok((0..cfg.num_relays)
        .map(|l| relay_problem(l, &topology, &channels, &cfg).0)
        .collect())
}

/// Raw problems and solutions of one drop.
#[derive(Debug, Clone, Serialize)]
pub struct DropDump {
    pub record: DropRecord,
    pub topology: crate::topology::NetworkTopology,
    pub problems: Vec<AllocationProblem>,
    pub users: Vec<Vec<RelayUser>>,
}

pub fn simulate_drop(spec: &ExperimentSpec, k: usize) -> Result<DropRecord> {
    Ok(simulate_drop_full(spec, k)?.record)
}

pub fn simulate_drop_full(spec: &ExperimentSpec, k: usize) -> Result<DropDump> {
    let (topology, channels, cfg) = drop_instance(&spec.scenario, spec.master_seed, k)?;
    let seed = cfg.rng_seed;
    let mut rec = DropRecord {
        drop: k,
        seed,
        sum_rate: 0.0,
        nominal_sum_rate: 0.0,
        user_rates: Vec::new(),
        d2d_rates: Vec::new(),
        ref_d2d_rates: Vec::new(),
        iterations: Vec::new(),
        converged: true,
        infeasible: false,
    };
    let mut problems = Vec::new();
    let mut users_all = Vec::new();
    for l in 0..cfg.num_relays {
        let (problem, users) = relay_problem(l, &topology, &channels, &cfg);
        if users.is_empty() {
            problems.push(problem);
            users_all.push(users);
            continue;
        }
        let out = solve_relay(spec, &problem)?;
        let nominal = if spec.mode == Mode::Nominal {
            out.sum_rate
        } else {
            solve_nominal(&problem, &spec.solver)?.solution.sum_rate
        };
        rec.nominal_sum_rate += nominal;
        if spec.mode != Mode::Reference {
            rec.sum_rate += out.sum_rate;
            rec.user_rates.extend_from_slice(&out.rates);
            for (i, user) in users.iter().enumerate() {
                if user.is_d2d() {
                    rec.d2d_rates.push(out.rates[i]);
                }
            }
            rec.iterations.push(out.iterations);
            rec.converged &= out.converged;
            rec.infeasible |= out.infeasible;
        }
        problems.push(problem);
        users_all.push(users);
    }

    let reference = solve_reference(&topology, &channels, &cfg, &spec.solver)?;
    rec.ref_d2d_rates = reference.d2d_direct.iter().map(|d| d.rate_bps).collect();
    if spec.mode == Mode::Reference {
        rec.sum_rate = reference.sum_rate();
        rec.user_rates = reference
            .cue_rate_bps
            .iter()
            .flatten()
            .copied()
            .chain(rec.ref_d2d_rates.iter().copied())
            .collect();
        rec.d2d_rates = rec.ref_d2d_rates.clone();
        rec.iterations = reference.cue_alloc.iter().map(|s| s.iterations).collect();
        rec.converged = reference.cue_alloc.iter().all(|s| s.converged || s.x.is_empty());
        rec.infeasible = reference.cue_alloc.iter().any(|s| s.infeasible);
    }
    Ok(DropDump {
        record: rec,
        topology,
        problems,
        users: users_all,
    })
}

/// Aggregates of one sweep value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: Mode,
    pub sweep_variable: Option<SweepVariable>,
    pub sweep_value: Option<f64>,
    pub num_drops: usize,
    pub mean_rate_per_ue: f64,
    pub mean_d2d_rate: f64,
    pub ref_d2d_rate: f64,
    /// `None` when the reference rate is zero.
    pub rate_gain_pct: Option<f64>,
    pub sum_rate: f64,
    pub r_delta: f64,
    pub iters_median: f64,
    pub iters_p90: f64,
    pub iters_max: usize,
    pub converged_drops: usize,
    pub infeasible_drops: usize,
}

impl RunMetrics {
    pub fn infeasibility_dominated(&self) -> bool {
        2 * self.infeasible_drops > self.num_drops
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        0.0
    } else {
        s / c as f64
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[usize], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1] as f64
}

fn median(sorted: &[usize]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2] as f64,
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) as f64,
    }
}

pub fn aggregate(spec: &ExperimentSpec, sweep_value: Option<f64>, drops: &[DropRecord]) -> RunMetrics {
    let mut iters: Vec<usize> = drops.iter().map(|d| d.iterations.iter().copied().max().unwrap_or(0)).collect();
    iters.sort_unstable();
    let d2d = mean(drops.iter().flat_map(|d| d.d2d_rates.iter().copied()));
    let reference = mean(drops.iter().flat_map(|d| d.ref_d2d_rates.iter().copied()));
    let gain = rate_gain(d2d, reference);
    RunMetrics {
        mode: spec.mode,
        sweep_variable: spec.sweep.as_ref().map(|s| s.variable),
        sweep_value,
        num_drops: drops.len(),
        mean_rate_per_ue: mean(drops.iter().flat_map(|d| d.user_rates.iter().copied())),
        mean_d2d_rate: d2d,
        ref_d2d_rate: reference,
        rate_gain_pct: (!gain.undefined).then_some(gain.pct),
        sum_rate: mean(drops.iter().map(|d| d.sum_rate)),
        r_delta: mean(drops.iter().map(|d| d.nominal_sum_rate - d.sum_rate)),
        iters_median: median(&iters),
        iters_p90: percentile(&iters, 0.9),
        iters_max: iters.last().copied().unwrap_or(0),
        converged_drops: drops.iter().filter(|d| d.converged).count(),
        infeasible_drops: drops.iter().filter(|d| d.infeasible).count(),
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Run all drops of one spec point, in drop order.
pub fn run_drops(spec: &ExperimentSpec, workers: usize) -> Result<Vec<DropRecord>> {
    pool(workers)?.install(|| {
        (0..spec.num_drops)
            .into_par_iter()
            .map(|k| simulate_drop(spec, k))
            .collect()
    })
}

/// One metrics row per sweep value. `workers = 0` uses every core.
pub fn run_experiment(spec: &ExperimentSpec, workers: usize) -> Result<Vec<RunMetrics>> {
    spec.validate()?;
    let values: Vec<Option<f64>> = match &spec.sweep {
        Some(sw) => sw.values.iter().map(|&v| Some(v)).collect(),
        None => vec![None],
    };
    let mut out = Vec::with_capacity(values.len());
    for (point, value) in spec.points()?.iter().zip(values) {
        let drops = run_drops(point, workers)?;
        out.push(aggregate(point, value, &drops));
    }
    Ok(out)
}

/// Same spec under several modes with paired drops.
pub fn compare_modes(spec: &ExperimentSpec, modes: &[Mode], workers: usize) -> Result<Vec<RunMetrics>> {
    let mut out = Vec::new();
    for &mode in modes {
        let s = ExperimentSpec {
            mode,
            ..spec.clone()
        };
        out.extend(run_experiment(&s, workers)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Config(format!("unknown format '{other}'"))),
        }
    }
}

/// Round to six significant digits.
pub fn sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

fn cell(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{}", sig6(v))
    }
}

pub const CSV_COLUMNS: [&str; 16] = [
    "mode",
    "sweep_variable",
    "sweep_value",
    "num_drops",
    "mean_rate_per_ue",
    "mean_d2d_rate",
    "ref_d2d_rate",
    "rate_gain_pct",
    "rate_gain_undefined",
    "sum_rate",
    "r_delta",
    "iters_median",
    "iters_p90",
    "iters_max",
    "converged_drops",
    "infeasible_drops",
];

fn rounded(m: &RunMetrics) -> RunMetrics {
    RunMetrics {
        sweep_value: m.sweep_value.map(sig6),
        mean_rate_per_ue: sig6(m.mean_rate_per_ue),
        mean_d2d_rate: sig6(m.mean_d2d_rate),
        ref_d2d_rate: sig6(m.ref_d2d_rate),
        rate_gain_pct: m.rate_gain_pct.map(sig6),
        sum_rate: sig6(m.sum_rate),
        r_delta: sig6(m.r_delta),
        iters_median: sig6(m.iters_median),
        iters_p90: sig6(m.iters_p90),
        ..m.clone()
    }
}

pub fn emit_results(metrics: &[RunMetrics], format: OutputFormat, out: impl Write) -> Result<()> {
    let io = |e: std::io::Error| Error::Io(e.to_string());
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let csv_err = |e: csv::Error| Error::Io(e.to_string());
            w.write_record(CSV_COLUMNS).map_err(csv_err)?;
            for m in metrics {
                let row = [
                    m.mode.name().to_string(),
                    m.sweep_variable.map(|v| v.name().to_string()).unwrap_or_default(),
                    m.sweep_value.map(cell).unwrap_or_default(),
                    m.num_drops.to_string(),
                    cell(m.mean_rate_per_ue),
                    cell(m.mean_d2d_rate),
                    cell(m.ref_d2d_rate),
                    cell(m.rate_gain_pct.unwrap_or(f64::INFINITY)),
                    m.rate_gain_pct.is_none().to_string(),
                    cell(m.sum_rate),
                    cell(m.r_delta),
                    cell(m.iters_median),
                    cell(m.iters_p90),
                    m.iters_max.to_string(),
                    m.converged_drops.to_string(),
                    m.infeasible_drops.to_string(),
                ];
                w.write_record(&row).map_err(csv_err)?;
            }
            w.flush().map_err(io)?;
        }
        OutputFormat::Json => {
            let rows: Vec<RunMetrics> = metrics.iter().map(rounded).collect();
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, &rows).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(out).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_results_json(text: &str) -> Result<Vec<RunMetrics>> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parses_flat_keys_and_sweep() {
        let spec = ExperimentSpec::from_toml(
            r#"
mode = "robust"
num_drops = 3
num_rbs = 4
psi1 = 0.1
step-a = 0.002
theta1 = [0.1, 0.2, 0.3, 0.4]
[sweep]
variable = "d2d_pair_distance"
values = [20, 40.5]
"#,
        )
        .unwrap();
        assert_eq!(spec.mode, Mode::Robust);
        assert_eq!(spec.scenario.num_rbs, 4);
        assert_eq!(spec.uncertainty.psi1, 0.1);
        assert_eq!(spec.solver.step_a, 0.002);
        assert_eq!(spec.sweep.as_ref().unwrap().values, vec![20.0, 40.5]);
        assert_eq!(spec.points().unwrap()[1].scenario.d2d_pair_distance_m, 40.5);
    }

    #[test]
    fn spec_rejects_bad_input() {
        assert!(ExperimentSpec::from_toml("colour = 3").is_err());
        assert!(ExperimentSpec::from_toml("mode = \"fast\"").is_err());
        assert!(ExperimentSpec::from_toml("num_drops = 0").is_err());
        assert!(ExperimentSpec::from_toml("[sweep]\nvariable = \"psi\"\nvalues = [0.2, 0.1]").is_err());
        assert!(ExperimentSpec::from_toml("distribution-family = \"gaussian\"").is_err());
        assert!(ExperimentSpec::from_toml("mode = \"oracle\"").is_err());
    }

    #[test]
    fn seeds_differ_by_drop_only() {
        assert_eq!(drop_seed(7, 3), drop_seed(7, 3));
        assert_ne!(drop_seed(7, 3), drop_seed(7, 4));
        assert_ne!(drop_seed(7, 3), drop_seed(8, 3));
    }

    #[test]
    fn six_digits() {
        assert_eq!(sig6(123456789.0), 123457000.0);
        assert_eq!(sig6(0.000123456789), 0.000123457);
        assert_eq!(cell(f64::INFINITY), "inf");
    }

    #[test]
    fn order_statistics() {
        assert_eq!(median(&[1, 2, 3, 10]), 2.5);
        assert_eq!(percentile(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10], 0.9), 9.0);
        assert_eq!(percentile(&[], 0.9), 0.0);
    }
}
