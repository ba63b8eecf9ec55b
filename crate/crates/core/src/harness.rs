//! End-to-end experiments: parameter sweeps over seeded, parallel Monte-Carlo
//! trials for covariance shaping (scheme A) and spatial multiplexing
//! (scheme B), with CSV and JSON output.
//!
//! Every trial draws its channels from a random source derived from
//! `(seed, point, trial)` and each scheme's pilot noise from a further
//! derived stream, so both schemes see the same channels and the output does
//! not depend on how trials are spread over threads.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{kronecker_covariance, path_covariance, BlockCovariance, ShapingVector};
use crate::error::{CovshapeError, Result};
use crate::geometry::{sample_from_components, PathComponent, Scenario};
use crate::linalg::{self, CMat};
use crate::optimizer::{optimize_groups, OptimizerSettings};
use crate::pilots::{
    build_pilot_book, effective_row, simulate_pilot_rx, trial_nmse, EstimateSet, MmseEstimator, PilotBook, PilotMode,
};
use crate::rates::{
    effective_sinr_imperfect, ergodic_rate_lb, mmse_precoder, moment_oracles, mrt_precoder, sum_rate_cs, sum_rate_sm, ue_combiner_sm, PrecodingMatrix,
};
use crate::scenario_file::ScenarioFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSelection {
    CovarianceShaping,
    SpatialMultiplexing,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    CovarianceShaping,
    SpatialMultiplexing,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::CovarianceShaping => "covariance_shaping",
            Scheme::SpatialMultiplexing => "spatial_multiplexing",
        }
    }
}

impl SchemeSelection {
    pub fn schemes(self) -> Vec<Scheme> {
        match self {
            SchemeSelection::CovarianceShaping => vec![Scheme::CovarianceShaping],
            SchemeSelection::SpatialMultiplexing => vec![Scheme::SpatialMultiplexing],
            SchemeSelection::Both => vec![Scheme::CovarianceShaping, Scheme::SpatialMultiplexing],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecoderKind {
    Mrt,
    Mmse,
}

impl PrecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            PrecoderKind::Mrt => "mrt",
            PrecoderKind::Mmse => "mmse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// BS transmit power in dBm.
    RhoBs,
    /// UE transmit power in dBm.
    RhoUe,
    /// Smallest in-group inter-UE distance in meters.
    D,
    /// BS antenna count.
    M,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::RhoBs => "rho_bs",
            SweepVariable::RhoUe => "rho_ue",
            SweepVariable::D => "d",
            SweepVariable::M => "m",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

/// Pilot groups `p` (default `⌈K/2⌉`) and length `tau` (default: the
/// shortest length each scheme allows).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    #[serde(default)]
    pub p: Option<usize>,
    #[serde(default)]
    pub tau: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Path to a scenario file, relative to the config file, or
    /// `bundled:<name>`.
    pub scenario: String,
    pub scheme: SchemeSelection,
    pub precoder: PrecoderKind,
    pub sweep: Sweep,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Serve UEs with even and odd index in separate, equally long slots.
    #[serde(default)]
    pub scheduling: bool,
    #[serde(default)]
    pub pilot: PilotConfig,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    /// Skip the optimizer and shape every UE onto its first antenna.
    #[serde(default)]
    pub baseline: bool,
    /// Optional override of `σ²_UE` in dBm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_ue_dbm: Option<f64>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_trials() -> usize {
    500
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CovshapeError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|source| CovshapeError::Json { path: path.to_path_buf(), source })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn scenario_file(&self) -> Result<ScenarioFile> {
        load_scenario(&self.scenario, self.base_dir.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(CovshapeError::InvalidConfig("trials must be at least 1".into()));
        }
        if self.sweep.values.is_empty() {
            return Err(CovshapeError::InvalidConfig("sweep grid is empty".into()));
        }
        if let Some(v) = self.sweep.values.iter().find(|v| !v.is_finite()) {
            return Err(CovshapeError::InvalidConfig(format!("sweep value {v} is not finite")));
        }
        if self.sweep.variable == SweepVariable::M
            && self.sweep.values.iter().any(|&v| v < 1.0 || v.fract() != 0.0)
        {
            return Err(CovshapeError::InvalidConfig("antenna counts must be positive integers".into()));
        }
        self.optimizer.validate()?;
        let file = self.scenario_file()?;
        let scenario = file.to_scenario()?;
        for scheme in self.scheme.schemes() {
            for slot in slots(scenario.num_ues(), self.scheduling) {
                self.pilot_book(scheme, &scenario, &slot)?;
            }
        }
        Ok(())
    }

    fn pilot_book(&self, scheme: Scheme, scenario: &Scenario, slot: &[usize]) -> Result<PilotBook> {
        let k = slot.len();
        let p = if self.scheduling { k } else { self.pilot.p.unwrap_or(k.div_ceil(2)) };
        if p == 0 || p > k {
            return Err(CovshapeError::InvalidConfig(format!("{p} pilot groups for {k} UEs")));
        }
        let n = scenario.ue_antennas(slot[0]);
        if slot.iter().any(|&u| scenario.ue_antennas(u) != n) {
            return Err(CovshapeError::InvalidConfig("all UEs must have the same antenna count".into()));
        }
        let (mode, rows) = match scheme {
            Scheme::CovarianceShaping => (PilotMode::Effective, 1),
            Scheme::SpatialMultiplexing => (PilotMode::Full, n),
        };
        build_pilot_book(mode, k, p, self.pilot.tau.unwrap_or(p * rows), n)
    }
}

/// Resolve `bundled:<name>` or a path relative to `base`.
pub fn load_scenario(source: &str, base: Option<&Path>) -> Result<ScenarioFile> {
    if let Some(name) = source.strip_prefix("bundled:") {
        return ScenarioFile::bundled(name);
    }
    let path = Path::new(source);
    match base {
        Some(dir) if path.is_relative() => ScenarioFile::load(dir.join(path)),
        _ => ScenarioFile::load(path),
    }
}

/// UE slots: one slot with everyone, or even and odd UE indices.
fn slots(k: usize, scheduling: bool) -> Vec<Vec<usize>> {
    if scheduling && k > 1 {
        vec![(0..k).step_by(2).collect(), (1..k).step_by(2).collect()]
    } else {
        vec![(0..k).collect()]
    }
}

fn apply_sweep(mut file: ScenarioFile, var: SweepVariable, value: f64) -> Result<ScenarioFile> {
    match var {
        SweepVariable::RhoBs => file.powers.rho_bs_dbm = value,
        SweepVariable::RhoUe => file.powers.rho_ue_dbm = value,
        SweepVariable::D => file = file.with_inter_ue_distance(value)?,
        SweepVariable::M => file = file.with_bs_antennas(value as usize)?,
    }
    Ok(file)
}

/// Seed for one random stream of one trial.
pub fn derive_seed(seed: u64, point: u64, trial: u64, stream: u64) -> u64 {
    let mut s = splitmix64(seed ^ 0x6a09_e667_f3bc_c908);
    s = splitmix64(s ^ point);
    s = splitmix64(s ^ trial);
    splitmix64(s ^ stream)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sum with a fixed pairwise reduction tree.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

/// Sample mean and standard error `s / √n`.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0) / n).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultRecord {
    pub sweep_var: SweepVariable,
    pub value: f64,
    pub scheme: Scheme,
    pub precoder: PrecoderKind,
    pub per_ue_rate: Vec<f64>,
    pub per_ue_nmse: Vec<f64>,
    pub mean_sum_rate: f64,
    pub stderr: f64,
    pub mean_nmse: f64,
    pub iterations: usize,
    pub trials: usize,
    pub seed: u64,
    pub wall_time_s: f64,
}

struct ShapingSlot {
    ues: Vec<usize>,
    shaping: Vec<ShapingVector>,
    phis: Vec<CMat>,
    estimator: MmseEstimator,
    energy: f64,
}

struct FullSlot {
    ues: Vec<usize>,
    estimator: MmseEstimator,
    energy: f64,
}

/// Everything a point needs before its trials run.
struct PointSetup {
    scenario: Scenario,
    components: Vec<Vec<PathComponent>>,
    shaping: Option<Vec<ShapingSlot>>,
    full: Option<Vec<FullSlot>>,
    iterations: usize,
    slot_weight: f64,
}

fn prepare_point(config: &ExperimentConfig, value: f64) -> Result<PointSetup> {
    let mut file = apply_sweep(config.scenario_file()?, config.sweep.variable, value)?;
    if let Some(s2) = config.sigma2_ue_dbm {
        file.noise.sigma2_ue_dbm = s2;
    }
    let scenario = file.to_scenario()?;
    let k = scenario.num_ues();
    let components: Vec<Vec<PathComponent>> = (0..k).map(|u| scenario.components(u)).collect::<Result<_>>()?;
    let sigmas: Vec<BlockCovariance> = (0..k).map(|u| path_covariance(&scenario, u)).collect::<Result<_>>()?;
    let all_slots = slots(k, config.scheduling);
    let schemes = config.scheme.schemes();
    let rho_ue = scenario.powers.rho_ue;
    let sigma2_bs = scenario.noise.sigma2_bs;

    let mut iterations = 0;
    let shaping = if schemes.contains(&Scheme::CovarianceShaping) {
        let mut out = Vec::new();
        for slot in &all_slots {
            let local: Vec<BlockCovariance> = slot.iter().map(|&u| sigmas[u].clone()).collect();
            let vectors = if config.baseline {
                local.iter().map(|s| ShapingVector::basis(s.ue_antennas(), 0)).collect::<Result<Vec<_>>>()?
            } else {
                let groups = local_groups(&scenario.shaping_groups, slot);
                let (v, reports) = optimize_groups(&local, &groups, &config.optimizer)?;
                iterations += reports.iter().map(|r| r.iterations).sum::<usize>();
                v
            };
            let phis: Vec<CMat> =
                local.iter().zip(&vectors).map(|(s, v)| s.effective(v).map(|e| e.matrix)).collect::<Result<_>>()?;
            let book = config.pilot_book(Scheme::CovarianceShaping, &scenario, slot)?;
            out.push(ShapingSlot {
                ues: slot.clone(),
                energy: phis.iter().map(linalg::trace_re).sum(),
                estimator: MmseEstimator::effective(&book, &phis, rho_ue, sigma2_bs)?,
                shaping: vectors,
                phis,
            });
        }
        Some(out)
    } else {
        None
    };
    let full = if schemes.contains(&Scheme::SpatialMultiplexing) {
        let mut out = Vec::new();
        for slot in &all_slots {
            let local: Vec<BlockCovariance> = slot.iter().map(|&u| sigmas[u].clone()).collect();
            let book = config.pilot_book(Scheme::SpatialMultiplexing, &scenario, slot)?;
            out.push(FullSlot {
                ues: slot.clone(),
                energy: local.iter().map(|s| s.trace()).sum(),
                estimator: MmseEstimator::full(&book, &local, rho_ue, sigma2_bs)?,
            });
        }
        Some(out)
    } else {
        None
    };
    Ok(PointSetup { scenario, components, shaping, full, iterations, slot_weight: 1.0 / all_slots.len() as f64 })
}

/// Shaping groups restricted to `slot`, in slot-local indices.
fn local_groups(groups: &[Vec<usize>], slot: &[usize]) -> Vec<Vec<usize>> {
    groups
        .iter()
        .map(|g| g.iter().filter_map(|u| slot.iter().position(|s| s == u)).collect::<Vec<_>>())
        .filter(|g| !g.is_empty())
        .collect()
}

/// Per-scheme outcome of one trial: sum rate, per-UE rates and NMSE.
#[derive(Debug, Clone)]
struct TrialOutcome {
    total: f64,
    per_ue: Vec<f64>,
    nmse: Vec<Option<f64>>,
}

fn precode(kind: PrecoderKind, est: &EstimateSet, energy: f64, scenario: &Scenario) -> Result<PrecodingMatrix> {
    match kind {
        PrecoderKind::Mrt => mrt_precoder(est, energy),
        PrecoderKind::Mmse => mmse_precoder(est, scenario.powers.rho_bs, scenario.noise.sigma2_ue),
    }
}

fn run_trial(config: &ExperimentConfig, setup: &PointSetup, point: u64, trial: u64) -> Result<Vec<TrialOutcome>> {
    let k = setup.scenario.num_ues();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, point, trial, 0));
    let channels: Vec<CMat> = setup.components.iter().map(|c| sample_from_components(c, &mut rng)).collect();
    let rho_bs = setup.scenario.powers.rho_bs;
    let sigma2_ue = setup.scenario.noise.sigma2_ue;
    let rho_ue = setup.scenario.powers.rho_ue;
    let sigma2_bs = setup.scenario.noise.sigma2_bs;
    let mut out = Vec::new();

    if let Some(slots) = &setup.shaping {
        let mut o = TrialOutcome { total: 0.0, per_ue: vec![0.0; k], nmse: vec![None; k] };
        for (s, slot) in slots.iter().enumerate() {
            let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, point, trial, 1 + 2 * s as u64));
            let hs: Vec<CMat> = slot.ues.iter().map(|&u| channels[u].clone()).collect();
            let rows: Vec<CMat> = hs.iter().zip(&slot.shaping).map(|(h, v)| effective_row(h, v)).collect::<Result<_>>()?;
            let y = simulate_pilot_rx(&hs, slot.estimator.book(), Some(&slot.shaping), rho_ue, sigma2_bs, &mut noise)?;
            let est = slot.estimator.estimate(&y)?;
            let w = precode(config.precoder, &est, slot.energy, &setup.scenario)?;
            let rate = sum_rate_cs(&rows, &w, &slot.shaping, rho_bs, sigma2_ue)?.scaled(setup.slot_weight);
            for (i, &u) in slot.ues.iter().enumerate() {
                o.per_ue[u] = rate.per_ue[i];
                o.nmse[u] = trial_nmse(&est.rows[i], &rows[i])?;
            }
        }
        o.total = pairwise_sum(&o.per_ue);
        out.push(o);
    }
    if let Some(slots) = &setup.full {
        let mut o = TrialOutcome { total: 0.0, per_ue: vec![0.0; k], nmse: vec![None; k] };
        for (s, slot) in slots.iter().enumerate() {
            let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, point, trial, 2 + 2 * s as u64));
            let hs: Vec<CMat> = slot.ues.iter().map(|&u| channels[u].clone()).collect();
            let y = simulate_pilot_rx(&hs, slot.estimator.book(), None, rho_ue, sigma2_bs, &mut noise)?;
            let est = slot.estimator.estimate(&y)?;
            let w = precode(config.precoder, &est, slot.energy, &setup.scenario)?;
            let streams: Vec<usize> = hs.iter().map(|h| h.nrows()).collect();
            let mut first = 0;
            let mut combiners = Vec::with_capacity(hs.len());
            for (h, &l) in hs.iter().zip(&streams) {
                combiners.push(ue_combiner_sm(h, &w, first, l, rho_bs, sigma2_ue)?);
                first += l;
            }
            let rate = sum_rate_sm(&hs, &w, &combiners, &streams, rho_bs, sigma2_ue)?.scaled(setup.slot_weight);
            for (i, &u) in slot.ues.iter().enumerate() {
                o.per_ue[u] = rate.per_ue[i];
                o.nmse[u] = trial_nmse(&est.rows[i], &hs[i])?;
            }
        }
        o.total = pairwise_sum(&o.per_ue);
        out.push(o);
    }
    Ok(out)
}

/// Closed-form ergodic lower bound of scheme A under MRT at one sweep point,
/// with the same shaping, pilots and slot weighting as [`run_point`].
pub fn ergodic_bound_point(config: &ExperimentConfig, value: f64) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.scheme = SchemeSelection::CovarianceShaping;
    let setup = prepare_point(&cfg, value)?;
    let snr_ue = setup.scenario.snr_ue();
    let snr_bs = setup.scenario.snr_bs();
    let mut total = 0.0;
    for slot in setup.shaping.as_deref().unwrap_or_default() {
        let norms: Vec<f64> = slot.shaping.iter().map(|v| v.norm()).collect();
        let gammas = effective_sinr_imperfect(&slot.phis, slot.estimator.book(), snr_ue, snr_bs, &norms)?;
        total += setup.slot_weight * ergodic_rate_lb(&gammas);
    }
    Ok(total)
}

/// Run all trials of one sweep point; one record per scheme.
pub fn run_point(config: &ExperimentConfig, value: f64, point: u64) -> Result<Vec<ResultRecord>> {
    let start = Instant::now();
    let wrap = |e: CovshapeError| CovshapeError::Point { var: config.sweep.variable.name(), value, source: Box::new(e) };
    let setup = prepare_point(config, value).map_err(wrap)?;
    let outcomes: Vec<Vec<TrialOutcome>> = (0..config.trials as u64)
        .into_par_iter()
        .map(|t| run_trial(config, &setup, point, t))
        .collect::<Result<_>>()
        .map_err(wrap)?;
    let elapsed = start.elapsed().as_secs_f64();
    let k = setup.scenario.num_ues();
    Ok(config
        .scheme
        .schemes()
        .into_iter()
        .enumerate()
        .map(|(idx, scheme)| {
            let totals: Vec<f64> = outcomes.iter().map(|o| o[idx].total).collect();
            let (mean, stderr) = mean_stderr(&totals);
            let per_ue_rate: Vec<f64> =
                (0..k).map(|u| mean_stderr(&outcomes.iter().map(|o| o[idx].per_ue[u]).collect::<Vec<_>>()).0).collect();
            let per_ue_nmse: Vec<f64> = (0..k)
                .map(|u| {
                    let xs: Vec<f64> = outcomes.iter().filter_map(|o| o[idx].nmse[u]).collect();
                    if xs.is_empty() {
                        f64::NAN
                    } else {
                        mean_stderr(&xs).0
                    }
                })
                .collect();
            ResultRecord {
                sweep_var: config.sweep.variable,
                value,
                scheme,
                precoder: config.precoder,
                mean_nmse: pairwise_sum(&per_ue_nmse) / k as f64,
                per_ue_rate,
                per_ue_nmse,
                mean_sum_rate: mean,
                stderr,
                iterations: if scheme == Scheme::CovarianceShaping { setup.iterations } else { 0 },
                trials: config.trials,
                seed: config.seed,
                wall_time_s: elapsed,
            }
        })
        .collect())
}

/// Run every sweep point on a pool of `threads` workers (rayon's default
/// when `None`).
pub fn run_sweep(config: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<ResultRecord>> {
    config.validate()?;
    let run = || -> Result<Vec<ResultRecord>> {
        let mut out = Vec::new();
        for (i, &v) in config.sweep.values.iter().enumerate() {
            out.extend(run_point(config, v, i as u64)?);
        }
        Ok(out)
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CovshapeError::InvalidConfig(format!("cannot start {n} worker threads: {e}")))?
            .install(run),
        None => run(),
    }
}

pub const CSV_HEADER: &str = "sweep_var,value,scheme,precoder,mean_sum_rate_bps_hz,stderr,mean_nmse,iterations,trials,seed";

pub fn records_to_csv(records: &[ResultRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.sweep_var.name(),
            r.value,
            r.scheme.name(),
            r.precoder.name(),
            r.mean_sum_rate,
            r.stderr,
            r.mean_nmse,
            r.iterations,
            r.trials,
            r.seed
        );
    }
    s
}

#[derive(Serialize)]
struct Sidecar<'a> {
    library: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    records: &'a [ResultRecord],
}

/// Sidecar path next to the CSV: `results.csv` → `results.meta.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

/// Write the CSV and its JSON sidecar.
pub fn write_outputs(config: &ExperimentConfig, records: &[ResultRecord], csv: &Path) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CovshapeError::Io { path, source }
    };
    std::fs::write(csv, records_to_csv(records)).map_err(io(csv))?;
    let side = sidecar_path(csv);
    let doc = Sidecar { library: env!("CARGO_PKG_NAME"), version: env!("CARGO_PKG_VERSION"), config, records };
    let text = serde_json::to_string_pretty(&doc).map_err(|source| CovshapeError::Json { path: side.clone(), source })?;
    std::fs::write(&side, text).map_err(io(&side))
}

#[derive(Debug, Clone, Serialize)]
pub struct NmseRow {
    pub ue: usize,
    pub rho_ue_dbm: f64,
    pub nmse: f64,
}

/// Estimation-only sweep over UE transmit powers. Effective mode shapes with
/// the optimizer first; `p` defaults to `⌈K/2⌉` and `tau` to the shortest
/// length the mode allows.
#[allow(clippy::too_many_arguments)]
pub fn nmse_sweep(
    file: &ScenarioFile,
    mode: PilotMode,
    p: Option<usize>,
    tau: Option<usize>,
    rho_ue_dbm: &[f64],
    trials: usize,
    seed: u64,
    settings: &OptimizerSettings,
) -> Result<Vec<NmseRow>> {
    if trials == 0 {
        return Err(CovshapeError::InvalidConfig("trials must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (point, &rho) in rho_ue_dbm.iter().enumerate() {
        let mut f = file.clone();
        f.powers.rho_ue_dbm = rho;
        let scenario = f.to_scenario()?;
        let k = scenario.num_ues();
        let n = scenario.ue_antennas(0);
        let p = p.unwrap_or(k.div_ceil(2));
        let components: Vec<Vec<PathComponent>> = (0..k).map(|u| scenario.components(u)).collect::<Result<_>>()?;
        let sigmas: Vec<BlockCovariance> = (0..k).map(|u| path_covariance(&scenario, u)).collect::<Result<_>>()?;
        let rows = if mode == PilotMode::Full { n } else { 1 };
        let book = build_pilot_book(mode, k, p, tau.unwrap_or(p * rows), n)?;
        let (shaping, estimator) = match mode {
            PilotMode::Full => (None, MmseEstimator::full(&book, &sigmas, scenario.powers.rho_ue, scenario.noise.sigma2_bs)?),
            PilotMode::Effective => {
                let (v, _) = optimize_groups(&sigmas, &scenario.shaping_groups, settings)?;
                let phis: Vec<CMat> =
                    sigmas.iter().zip(&v).map(|(s, v)| s.effective(v).map(|e| e.matrix)).collect::<Result<_>>()?;
                let est = MmseEstimator::effective(&book, &phis, scenario.powers.rho_ue, scenario.noise.sigma2_bs)?;
                (Some(v), est)
            }
        };
        let per_trial: Vec<Vec<Option<f64>>> = (0..trials as u64)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, point as u64, t, 0));
                let hs: Vec<CMat> = components.iter().map(|c| sample_from_components(c, &mut rng)).collect();
                let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(seed, point as u64, t, 1));
                let y = simulate_pilot_rx(&hs, &book, shaping.as_deref(), scenario.powers.rho_ue, scenario.noise.sigma2_bs, &mut noise)?;
                let est = estimator.estimate(&y)?;
                (0..k)
                    .map(|u| {
                        let truth = match &shaping {
                            Some(v) => effective_row(&hs[u], &v[u])?,
                            None => hs[u].clone(),
                        };
                        trial_nmse(&est.rows[u], &truth)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for u in 0..k {
            let xs: Vec<f64> = per_trial.iter().filter_map(|t| t[u]).collect();
            let nmse = if xs.is_empty() { f64::NAN } else { pairwise_sum(&xs) / xs.len() as f64 };
            out.push(NmseRow { ue: u, rho_ue_dbm: rho, nmse });
        }
    }
    Ok(out)
}

pub fn nmse_rows_to_csv(rows: &[NmseRow]) -> String {
    let mut s = String::from("ue,rho_ue_dbm,nmse\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.ue, r.rho_ue_dbm, r.nmse);
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Measured quantity the check compares against `tolerance`.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, measured: f64, tolerance: f64, detail: impl Into<String>) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail: detail.into(),
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Replace the scenario covariances by Kronecker-structured ones.
    Kronecker,
    /// Add a 1e-3 anti-Hermitian perturbation to one covariance.
    NonHermitian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidateOptions {
    pub scenario: String,
    pub bs_antennas: usize,
    pub moment_trials: usize,
    pub seed: u64,
    pub inject: Option<Fault>,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self { scenario: "bundled:nlos_2ue".into(), bs_antennas: 8, moment_trials: 20_000, seed: 7, inject: None }
    }
}

/// Module-level invariant suites at small dimensions. Failures become report
/// entries; only setup errors (unreadable scenario) are returned as `Err`.
pub fn validate(options: &ValidateOptions) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let file = load_scenario(&options.scenario, None)?.with_bs_antennas(options.bs_antennas)?;
    let scenario = file.to_scenario()?;
    let k = scenario.num_ues();
    let mut sigmas: Vec<BlockCovariance> = (0..k).map(|u| path_covariance(&scenario, u)).collect::<Result<_>>()?;

    match options.inject {
        Some(Fault::Kronecker) => {
            sigmas = sigmas
                .iter()
                .map(|s| {
                    let r = s.receive_cov();
                    let t = s.transmit_cov().unscale(s.trace());
                    kronecker_covariance(&r, &t)
                })
                .collect::<Result<_>>()?;
        }
        Some(Fault::NonHermitian) => {
            let mut d = sigmas[0].dense();
            let bump = 1e-3 * d.norm();
            d[(0, 1)] += linalg::c(bump, 0.0);
            sigmas[0] = BlockCovariance::from_dense(sigmas[0].ue_antennas(), sigmas[0].bs_antennas(), d)?;
        }
        None => {}
    }

    for (u, s) in sigmas.iter().enumerate() {
        let psd = s.psd_report();
        let defect = psd.hermitian_defect.max(-psd.min_eigenvalue / psd.trace.max(f64::MIN_POSITIVE));
        report.push(
            format!("covariance {u} Hermitian PSD"),
            defect,
            1e-10,
            format!("hermitian defect {:.3e}, min eigenvalue {:.3e}", psd.hermitian_defect, psd.min_eigenvalue),
        );
    }

    // path-sum and dense representations agree
    let mut worst = 0.0f64;
    for s in &sigmas {
        let dense = s.to_dense();
        for _ in 0..4 {
            let v = ShapingVector::random(&mut rng, s.ue_antennas());
            let a = s.effective(&v)?.matrix;
            let b = dense.effective(&v)?.matrix;
            worst = worst.max((a - &b).norm() / b.norm().max(f64::MIN_POSITIVE));
        }
    }
    report.push("representation equivalence", worst, 1e-10, "relative difference of effective covariances");

    for (mode, tau) in [(PilotMode::Full, 4), (PilotMode::Effective, 2)] {
        let book = build_pilot_book(mode, 4, 2, tau, 2)?;
        report.push(format!("{mode:?} pilot orthogonality"), book.orthogonality_defect(), 1e-12, format!("P=2, tau={tau}"));
    }

    // the Kronecker degeneracy suite on synthetic statistics
    let n = 2;
    let m = options.bs_antennas;
    let kron: Vec<BlockCovariance> = (0..2)
        .map(|_| kronecker_covariance(&linalg::random_psd(&mut rng, n, n), &linalg::random_psd(&mut rng, m, 3)))
        .collect::<Result<_>>()?;
    let spread = delta_spread(&kron, 50, &mut rng)?;
    report.push("Kronecker degeneracy", spread, 1e-10, "relative spread of delta over random shaping pairs");

    // shaping must be able to move the objective on the scenario statistics
    if k >= 2 {
        let spread = delta_spread(&sigmas[..2], 50, &mut rng)?;
        let detail = if spread <= 1e-10 {
            "objective constant across shaping vectors: optimizer is degenerate".to_string()
        } else {
            format!("objective varies by {spread:.3e} across shaping vectors")
        };
        report.checks.push(CheckResult {
            name: "optimizer degeneracy".into(),
            passed: spread > 1e-10,
            measured: spread,
            tolerance: 1e-10,
            detail,
        });
    }

    // moment oracles at M=8, N=2, K=2 with a shared pilot
    let mom_sigmas: Vec<BlockCovariance> = (0..2)
        .map(|_| BlockCovariance::from_dense(2, 8, linalg::random_psd(&mut rng, 16, 6)))
        .collect::<Result<_>>()?;
    let shaping: Vec<ShapingVector> = (0..2).map(|_| ShapingVector::random(&mut rng, 2)).collect();
    let book = build_pilot_book(PilotMode::Effective, 2, 1, 1, 2)?;
    let checks = moment_oracles(&mom_sigmas, &shaping, &book, 1.0, 0.5, options.moment_trials, &mut rng)?;
    for chk in checks {
        report.push(
            format!("moment {}", chk.name),
            chk.z_score(),
            3.0,
            format!("analytic {:.6e}, empirical {:.6e} ± {:.2e}", chk.analytic, chk.empirical, chk.stderr),
        );
    }
    Ok(report)
}

/// `(max δ − min δ) / max δ` over random shaping pairs.
fn delta_spread<R: rand::Rng + ?Sized>(sigmas: &[BlockCovariance], samples: usize, rng: &mut R) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for _ in 0..samples {
        let a = ShapingVector::random(rng, sigmas[0].ue_antennas());
        let b = ShapingVector::random(rng, sigmas[1].ue_antennas());
        let d = crate::covariance::delta_metric(&sigmas[0], &sigmas[1], &a, &b)?;
        lo = lo.min(d);
        hi = hi.max(d);
    }
    Ok(if hi > 0.0 { (hi - lo) / hi } else { 0.0 })
}
