//! Shaping-vector optimization.
//!
//! Each UE update minimizes a generalized Rayleigh quotient
//! `v^H A_k v / v^H B_k v` with `B_k = Σ_m Σ_{k,mm}` and
//! `A_k = Σ_{m,n} (Σ_{j≠k} η_{j,mn}) Σ_{k,mn}`; the quotient equals
//! `Σ_{j≠k} δ(v, v_j)`. Two UEs alternate; more UEs cycle through block
//! coordinate descent with an optional damped step.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{delta_metric, BlockCovariance, CovarianceRepr, ShapingVector};
use crate::error::{CovshapeError, Result};
use crate::linalg::{self, CMat, CVec, ZERO};

/// Objective values below this are treated as exact zeros by the stopping rules.
pub const DELTA_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialVectors {
    /// Dominant eigenvector of each UE's receive covariance.
    DominantEigen,
    /// Uniform draws on the unit sphere from a fixed seed, UE by UE.
    Random { seed: u64 },
    /// Explicit vectors, one per UE, normalized on use.
    Given { vectors: Vec<Vec<Complex64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub accuracy: f64,
    pub step_size: f64,
    pub max_iterations: usize,
    pub initial: InitialVectors,
    /// Every UE replays the whole procedure locally and keeps its own vector.
    pub distributed: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            accuracy: 1e-6,
            step_size: 1.0,
            max_iterations: 100,
            initial: InitialVectors::DominantEigen,
            distributed: false,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.accuracy > 0.0 && self.accuracy.is_finite()) {
            return Err(CovshapeError::InvalidConfig(format!("accuracy must be positive, got {}", self.accuracy)));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(CovshapeError::InvalidConfig(format!(
                "step size must lie in (0, 1], got {}",
                self.step_size
            )));
        }
        if self.max_iterations == 0 {
            return Err(CovshapeError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerReport {
    pub vectors: Vec<ShapingVector>,
    /// Objective at the initial vectors followed by one value per iteration.
    /// Two UEs report `δ`, more UEs report `Σ_{k<j} δ(v_k, v_j)`.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl OptimizerReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial objective")
    }
}

/// `η_{j,mn} = v_j^H Σ_{j,mn}^H v_j / v_j^H B_j v_j`, which is `Φ̄_j / tr Φ̄_j`.
pub fn eta_weights(sigma_j: &BlockCovariance, v_j: &ShapingVector) -> Result<CMat> {
    let eff = sigma_j.effective(v_j)?;
    let tr = eff.trace();
    if tr <= sigma_j.degenerate_threshold() {
        return Err(CovshapeError::DegenerateShaping { ue: 0 });
    }
    Ok(eff.matrix.unscale(tr))
}

/// `A_k = Σ_{m,n} η_{mn} Σ_{k,mn}`.
pub fn objective_matrix(sigma_k: &BlockCovariance, eta: &CMat) -> Result<CMat> {
    let (n, m) = (sigma_k.ue_antennas(), sigma_k.bs_antennas());
    if eta.nrows() != m || eta.ncols() != m {
        return Err(CovshapeError::DimensionMismatch { what: "eta weights", expected: m, found: eta.nrows() });
    }
    let mut out = CMat::zeros(n, n);
    match sigma_k.repr() {
        CovarianceRepr::PathSum(terms) => {
            for t in terms {
                let s = t.bs_response.dotc(&(eta * &t.bs_response)).re * t.weight;
                let ac = t.ue_response.map(|z| z.conj());
                out.ger(Complex64::new(s, 0.0), &t.ue_response, &ac, Complex64::new(1.0, 0.0));
            }
        }
        CovarianceRepr::Dense(d) => {
            for a in 0..m {
                for b in 0..m {
                    let e = eta[(a, b)];
                    if e != ZERO {
                        out += d.view((a * n, b * n), (n, n)) * e;
                    }
                }
            }
        }
    }
    Ok(linalg::hermitian_part(&out))
}

/// Minimum generalized eigenvector of the pencil `(A, B)`.
///
/// The pencil is reduced to the range of `B`; directions `B` cannot see would
/// null the UE's channel. Ties in the minimum eigenvalue go to the direction
/// with the largest `v^H B v`. The result is phase-normalized.
pub fn rayleigh_min(numerator: &CMat, denominator: &CMat) -> Result<ShapingVector> {
    let n = denominator.nrows();
    if numerator.shape() != (n, n) || !denominator.is_square() {
        return Err(CovshapeError::DimensionMismatch {
            what: "Rayleigh quotient pencil",
            expected: n,
            found: numerator.nrows(),
        });
    }
    let tr = linalg::trace_re(denominator);
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(CovshapeError::RankDeficient(format!("denominator trace is {tr}")));
    }
    let (lam, u) = linalg::eigh(denominator);
    let keep: Vec<usize> = (0..n).filter(|&i| lam[i] > 1e-12 * tr / n as f64).collect();
    if keep.is_empty() {
        return Err(CovshapeError::RankDeficient("denominator has no usable range".into()));
    }
    let r = keep.len();
    // T = U_r Λ_r^{-1/2}
    let mut t = CMat::zeros(n, r);
    for (col, &i) in keep.iter().enumerate() {
        let s = 1.0 / lam[i].sqrt();
        for row in 0..n {
            t[(row, col)] = u[(row, i)] * s;
        }
    }
    let c = t.adjoint() * numerator * &t;
    let (mu, y) = linalg::eigh(&c);
    let scale = mu.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-12 * scale;
    let cluster = mu.iter().take_while(|&&x| x - mu[0] <= tol).count();
    let x = if cluster == 1 {
        &t * y.column(0)
    } else {
        // every x = T y in the cluster has x^H B x = |y|², so maximizing
        // retained power means minimizing |x|² / |y|²
        let xs = &t * y.columns(0, cluster);
        let (_, z) = linalg::eigh(&(xs.adjoint() * &xs));
        &xs * z.column(0)
    };
    let mut v: CVec = x.clone_owned();
    linalg::normalize_phase(&mut v);
    ShapingVector::new(v)
}

/// Dominant eigenvector of `R_k`, phase-normalized.
pub fn dominant_receive_vector(sigma: &BlockCovariance) -> Result<ShapingVector> {
    let r = sigma.receive_cov();
    let (_, u) = linalg::eigh(&r);
    let mut v: CVec = u.column(r.ncols() - 1).into_owned();
    linalg::normalize_phase(&mut v);
    ShapingVector::new(v)
}

pub fn initial_vectors(sigmas: &[BlockCovariance], init: &InitialVectors) -> Result<Vec<ShapingVector>> {
    match init {
        InitialVectors::DominantEigen => sigmas.iter().map(dominant_receive_vector).collect(),
        InitialVectors::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok(sigmas.iter().map(|s| ShapingVector::random(&mut rng, s.ue_antennas())).collect())
        }
        InitialVectors::Given { vectors } => {
            if vectors.len() != sigmas.len() {
                return Err(CovshapeError::DimensionMismatch {
                    what: "initial vectors",
                    expected: sigmas.len(),
                    found: vectors.len(),
                });
            }
            vectors
                .iter()
                .zip(sigmas)
                .map(|(v, s)| {
                    if v.len() != s.ue_antennas() {
                        return Err(CovshapeError::DimensionMismatch {
                            what: "initial vector",
                            expected: s.ue_antennas(),
                            found: v.len(),
                        });
                    }
                    ShapingVector::new(CVec::from_column_slice(v))
                })
                .collect()
        }
    }
}

fn relabel(err: CovshapeError, k: usize, j: usize) -> CovshapeError {
    match err {
        CovshapeError::DegenerateShaping { ue: 0 } => CovshapeError::DegenerateShaping { ue: k },
        CovshapeError::DegenerateShaping { .. } => CovshapeError::DegenerateShaping { ue: j },
        other => other,
    }
}

fn pair_delta(sigmas: &[BlockCovariance], vs: &[ShapingVector], k: usize, j: usize) -> Result<f64> {
    delta_metric(&sigmas[k], &sigmas[j], &vs[k], &vs[j]).map_err(|e| relabel(e, k, j))
}

/// `A_k` against the current vectors of every other UE. Path-sum inputs keep
/// `η` implicit: `b_p^H η_j b_p = Σ_q c_q |b_p^H b_q|²`.
fn interference_matrix(sigmas: &[BlockCovariance], vs: &[ShapingVector], k: usize) -> Result<CMat> {
    let n = sigmas[k].ue_antennas();
    let mut acc = CMat::zeros(n, n);
    for j in (0..sigmas.len()).filter(|&j| j != k) {
        let term = match (sigmas[k].paths(), sigmas[j].paths()) {
            (Some(pk), Some(pj)) => {
                let tr = sigmas[j].effective_trace(&vs[j])?;
                if tr <= sigmas[j].degenerate_threshold() {
                    return Err(CovshapeError::DegenerateShaping { ue: j });
                }
                let c: Vec<f64> = pj.iter().map(|t| t.weight * vs[j].gain(&t.ue_response) / tr).collect();
                let mut a = CMat::zeros(n, n);
                for tp in pk {
                    let s: f64 = pj
                        .iter()
                        .zip(&c)
                        .map(|(tq, &cq)| cq * tp.bs_response.dotc(&tq.bs_response).norm_sqr())
                        .sum();
                    let ac = tp.ue_response.map(|z| z.conj());
                    a.ger(Complex64::new(s * tp.weight, 0.0), &tp.ue_response, &ac, Complex64::new(1.0, 0.0));
                }
                linalg::hermitian_part(&a)
            }
            _ => {
                let eta = eta_weights(&sigmas[j], &vs[j]).map_err(|e| relabel(e, k, j))?;
                objective_matrix(&sigmas[k], &eta)?
            }
        };
        acc += term;
    }
    Ok(acc)
}

fn best_response(sigmas: &[BlockCovariance], vs: &[ShapingVector], k: usize) -> Result<ShapingVector> {
    let a = interference_matrix(sigmas, vs, k)?;
    rayleigh_min(&a, &sigmas[k].receive_cov())
}

/// `normalize(α v* + (1 − α) v_prev)` after rotating `v*` onto `v_prev`'s phase.
fn blend(v_star: ShapingVector, v_prev: &ShapingVector, alpha: f64) -> Result<ShapingVector> {
    if alpha == 1.0 {
        return Ok(v_star);
    }
    let overlap = v_star.coefficients().dotc(v_prev.coefficients());
    let rot = if overlap.norm() > 0.0 { overlap / overlap.norm() } else { Complex64::new(1.0, 0.0) };
    let mixed = v_star.coefficients() * (rot * alpha) + v_prev.coefficients() * Complex64::new(1.0 - alpha, 0.0);
    ShapingVector::new(mixed)
}

fn check_inputs(sigmas: &[BlockCovariance], settings: &OptimizerSettings, min_k: usize) -> Result<()> {
    settings.validate()?;
    if sigmas.len() < min_k {
        return Err(CovshapeError::InvalidConfig(format!(
            "optimizer needs at least {min_k} UEs, got {}",
            sigmas.len()
        )));
    }
    let m = sigmas[0].bs_antennas();
    if let Some(s) = sigmas.iter().find(|s| s.bs_antennas() != m) {
        return Err(CovshapeError::DimensionMismatch {
            what: "BS antennas across UEs",
            expected: m,
            found: s.bs_antennas(),
        });
    }
    Ok(())
}

fn wrap(iteration: usize, ue: usize) -> impl Fn(CovshapeError) -> CovshapeError {
    move |e| {
        let ue = match &e {
            CovshapeError::DegenerateShaping { ue } => *ue,
            _ => ue,
        };
        CovshapeError::Optimizer { iteration, ue, source: Box::new(e) }
    }
}

/// Alternating optimization for two UEs.
pub fn optimize_pair(
    sigma_k: &BlockCovariance,
    sigma_j: &BlockCovariance,
    settings: &OptimizerSettings,
) -> Result<OptimizerReport> {
    let sigmas = [sigma_k.clone(), sigma_j.clone()];
    check_inputs(&sigmas, settings, 2)?;
    let run = |sigmas: &[BlockCovariance]| -> Result<OptimizerReport> {
        let mut vs = initial_vectors(sigmas, &settings.initial)?;
        let mut prev = pair_delta(sigmas, &vs, 0, 1).map_err(wrap(0, 0))?;
        let mut trace = vec![prev];
        let mut converged = false;
        let mut iterations = 0;
        for it in 1..=settings.max_iterations {
            iterations = it;
            vs[0] = best_response(sigmas, &vs, 0).map_err(wrap(it, 0))?;
            vs[1] = best_response(sigmas, &vs, 1).map_err(wrap(it, 1))?;
            let d = pair_delta(sigmas, &vs, 0, 1).map_err(wrap(it, 0))?;
            trace.push(d);
            if d < DELTA_FLOOR || (d - prev).abs() / d <= settings.accuracy {
                converged = true;
                break;
            }
            prev = d;
        }
        Ok(OptimizerReport { vectors: vs, objective_trace: trace, iterations, converged })
    };
    if settings.distributed {
        distributed(&sigmas, run)
    } else {
        run(&sigmas)
    }
}

/// Block coordinate descent over all UEs.
pub fn optimize_multi(sigmas: &[BlockCovariance], settings: &OptimizerSettings) -> Result<OptimizerReport> {
    check_inputs(sigmas, settings, 2)?;
    let run = |sigmas: &[BlockCovariance]| -> Result<OptimizerReport> {
        let k_count = sigmas.len();
        let mut vs = initial_vectors(sigmas, &settings.initial)?;
        let pairs: Vec<(usize, usize)> =
            (0..k_count).flat_map(|k| (k + 1..k_count).map(move |j| (k, j))).collect();
        let eval = |vs: &[ShapingVector], it: usize| -> Result<Vec<f64>> {
            pairs.iter().map(|&(k, j)| pair_delta(sigmas, vs, k, j).map_err(wrap(it, k))).collect()
        };
        let mut prev = eval(&vs, 0)?;
        let mut trace = vec![prev.iter().sum()];
        let mut converged = false;
        let mut iterations = 0;
        for it in 1..=settings.max_iterations {
            iterations = it;
            for k in 0..k_count {
                let v_star = best_response(sigmas, &vs, k).map_err(wrap(it, k))?;
                vs[k] = blend(v_star, &vs[k], settings.step_size)?;
            }
            let cur = eval(&vs, it)?;
            trace.push(cur.iter().sum());
            // ordered pairs k ≠ j: each unordered pair counts twice
            let change: f64 = cur
                .iter()
                .zip(&prev)
                .filter(|(&d, _)| d >= DELTA_FLOOR)
                .map(|(&d, &p)| 2.0 * (d - p).abs() / d)
                .sum();
            if change <= settings.accuracy {
                converged = true;
                break;
            }
            prev = cur;
        }
        Ok(OptimizerReport { vectors: vs, objective_trace: trace, iterations, converged })
    };
    if settings.distributed {
        distributed(sigmas, run)
    } else {
        run(sigmas)
    }
}

/// Each UE replays the procedure from the shared statistics and keeps only
/// its own vector.
fn distributed<F>(sigmas: &[BlockCovariance], run: F) -> Result<OptimizerReport>
where
    F: Fn(&[BlockCovariance]) -> Result<OptimizerReport> + Sync,
{
    let local: Vec<OptimizerReport> = (0..sigmas.len()).into_par_iter().map(|_| run(sigmas)).collect::<Result<_>>()?;
    let vectors = local.iter().enumerate().map(|(k, r)| r.vectors[k].clone()).collect();
    let first = &local[0];
    Ok(OptimizerReport {
        vectors,
        objective_trace: first.objective_trace.clone(),
        iterations: first.iterations,
        converged: first.converged,
    })
}

/// Shaping vectors for a full scenario, optimized independently per group.
/// Single-UE groups keep the dominant receive direction.
pub fn optimize_groups(
    sigmas: &[BlockCovariance],
    groups: &[Vec<usize>],
    settings: &OptimizerSettings,
) -> Result<(Vec<ShapingVector>, Vec<OptimizerReport>)> {
    let mut out: Vec<Option<ShapingVector>> = vec![None; sigmas.len()];
    let mut reports = Vec::new();
    for group in groups {
        let local: Vec<BlockCovariance> = group.iter().map(|&u| sigmas[u].clone()).collect();
        let mut local_settings = settings.clone();
        if let InitialVectors::Given { vectors } = &settings.initial {
            local_settings.initial = InitialVectors::Given { vectors: group.iter().map(|&u| vectors[u].clone()).collect() };
        }
        let vecs = match local.len() {
            0 => continue,
            1 => vec![dominant_receive_vector(&local[0])?],
            2 => {
                let r = optimize_pair(&local[0], &local[1], &local_settings)?;
                let v = r.vectors.clone();
                reports.push(r);
                v
            }
            _ => {
                let r = optimize_multi(&local, &local_settings)?;
                let v = r.vectors.clone();
                reports.push(r);
                v
            }
        };
        for (&u, v) in group.iter().zip(vecs) {
            out[u] = Some(v);
        }
    }
    let vectors = out
        .into_iter()
        .enumerate()
        .map(|(u, v)| v.ok_or_else(|| CovshapeError::ScenarioInconsistency(format!("UE {u} is in no shaping group"))))
        .collect::<Result<_>>()?;
    Ok((vectors, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub samples_per_ue: usize,
    pub seed: u64,
    /// Largest number of combinations the search agrees to enumerate.
    pub cap: u128,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { samples_per_ue: 1000, seed: 0, cap: 10_000_000 }
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub vectors: Vec<ShapingVector>,
    pub objective: f64,
}

/// Pairwise δ between every sample of UE `k` and every sample of UE `j`.
fn delta_table(
    sk: &BlockCovariance,
    sj: &BlockCovariance,
    vk: &[ShapingVector],
    vj: &[ShapingVector],
) -> Vec<f64> {
    let mut out = vec![f64::INFINITY; vk.len() * vj.len()];
    match (sk.paths(), sj.paths()) {
        (Some(pk), Some(pj)) => {
            let cross: Vec<f64> = pk
                .iter()
                .flat_map(|tp| pj.iter().map(move |tq| tp.bs_response.dotc(&tq.bs_response).norm_sqr()))
                .collect();
            let gains = |paths: &[crate::covariance::PathTerm], v: &ShapingVector| -> (Vec<f64>, f64) {
                let g: Vec<f64> = paths.iter().map(|t| t.weight * v.gain(&t.ue_response)).collect();
                let tr = paths.iter().zip(&g).map(|(t, &g)| g * t.bs_response.norm_squared()).sum();
                (g, tr)
            };
            let gj: Vec<(Vec<f64>, f64)> = vj.iter().map(|v| gains(pj, v)).collect();
            let (tk_floor, tj_floor) = (sk.degenerate_threshold(), sj.degenerate_threshold());
            out.par_chunks_mut(vj.len()).zip(vk.par_iter()).for_each(|(row, v)| {
                let (gk, tk) = gains(pk, v);
                if tk <= tk_floor {
                    return;
                }
                let w: Vec<f64> = (0..pj.len())
                    .map(|q| (0..pk.len()).map(|p| gk[p] * cross[p * pj.len() + q]).sum())
                    .collect();
                for (slot, (g, tj)) in row.iter_mut().zip(&gj) {
                    if *tj <= tj_floor {
                        continue;
                    }
                    let num: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
                    *slot = num.max(0.0) / (tk * tj);
                }
            });
        }
        _ => {
            out.par_chunks_mut(vj.len()).zip(vk.par_iter()).for_each(|(row, v)| {
                for (slot, u) in row.iter_mut().zip(vj) {
                    if let Ok(d) = delta_metric(sk, sj, v, u) {
                        *slot = d;
                    }
                }
            });
        }
    }
    out
}

fn improves(candidate: f64, best: f64) -> bool {
    if !best.is_finite() {
        return candidate < best;
    }
    candidate < best - 1e-12 * best.abs()
}

/// Best combination of uniformly sampled shaping vectors for the summed
/// objective. Ties keep the lexicographically first combination.
pub fn exhaustive_oracle(sigmas: &[BlockCovariance], settings: &OracleSettings) -> Result<OracleResult> {
    let k_count = sigmas.len();
    let s = settings.samples_per_ue;
    if k_count < 2 || s == 0 {
        return Err(CovshapeError::InvalidConfig("exhaustive search needs K >= 2 and at least one sample".into()));
    }
    let combinations = (s as u128).checked_pow(k_count as u32).unwrap_or(u128::MAX);
    if combinations > settings.cap {
        return Err(CovshapeError::SearchTooLarge { combinations, cap: settings.cap });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let samples: Vec<Vec<ShapingVector>> = sigmas
        .iter()
        .map(|sig| (0..s).map(|_| ShapingVector::random(&mut rng, sig.ue_antennas())).collect())
        .collect();
    let mut tables = vec![vec![Vec::new(); k_count]; k_count];
    for k in 0..k_count {
        for j in k + 1..k_count {
            tables[k][j] = delta_table(&sigmas[k], &sigmas[j], &samples[k], &samples[j]);
        }
    }
    let objective_of = |idx: &[usize]| -> f64 {
        let mut acc = 0.0;
        for k in 0..k_count {
            for j in k + 1..k_count {
                acc += tables[k][j][idx[k] * s + idx[j]];
            }
        }
        acc
    };
    let rest = s.pow(k_count as u32 - 1);
    let per_first: Vec<(f64, Vec<usize>)> = (0..s)
        .into_par_iter()
        .map(|first| {
            let mut best = (f64::INFINITY, Vec::new());
            let mut idx = vec![0usize; k_count];
            idx[0] = first;
            for r in 0..rest {
                let mut x = r;
                for slot in idx[1..].iter_mut().rev() {
                    *slot = x % s;
                    x /= s;
                }
                let obj = objective_of(&idx);
                if improves(obj, best.0) {
                    best = (obj, idx.clone());
                }
            }
            best
        })
        .collect();
    let mut best = (f64::INFINITY, Vec::new());
    for cand in per_first {
        if improves(cand.0, best.0) {
            best = cand;
        }
    }
    if !best.0.is_finite() {
        return Err(CovshapeError::DegenerateShaping { ue: 0 });
    }
    let vectors = best.1.iter().enumerate().map(|(k, &i)| samples[k][i].clone()).collect();
    Ok(OracleResult { vectors, objective: best.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{kronecker_covariance, PathTerm};
    use crate::linalg::{c, random_psd};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_paths<R: Rng>(rng: &mut R, n: usize, m: usize, u: usize) -> BlockCovariance {
        let terms = (0..u)
            .map(|_| PathTerm {
                weight: rng.random_range(0.1..2.0),
                ue_response: linalg::complex_normal_vector(rng, n),
                bs_response: linalg::complex_normal_vector(rng, m),
            })
            .collect();
        BlockCovariance::from_paths(n, m, terms).unwrap()
    }

    fn quotient(a: &CMat, b: &CMat, v: &CVec) -> f64 {
        v.dotc(&(a * v)).re / v.dotc(&(b * v)).re
    }

    fn diag(x: &[f64]) -> CMat {
        CMat::from_diagonal(&CVec::from_iterator(x.len(), x.iter().map(|&v| c(v, 0.0))))
    }

    #[test]
    fn rayleigh_min_diagonal_cases() {
        let v = rayleigh_min(&diag(&[2.0, 1.0]), &CMat::identity(2, 2)).unwrap();
        assert!((v.coefficients() - CVec::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0)])).norm() < 1e-12);
        let v = rayleigh_min(&CMat::identity(2, 2), &diag(&[1.0, 4.0])).unwrap();
        assert!((v.coefficients()[1] - c(1.0, 0.0)).norm() < 1e-12);
        assert!((quotient(&CMat::identity(2, 2), &diag(&[1.0, 4.0]), v.coefficients()) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rayleigh_min_beats_sphere_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = linalg::complex_normal_matrix(&mut rng, 4, 4);
        let a = linalg::hermitian_part(&h);
        let b = random_psd(&mut rng, 4, 6);
        let v = rayleigh_min(&a, &b).unwrap();
        let q = quotient(&a, &b, v.coefficients());
        for _ in 0..10_000 {
            let x = linalg::random_unit_vector(&mut rng, 4);
            assert!(q <= quotient(&a, &b, &x) + 1e-12 * q.abs().max(1.0));
        }
    }

    #[test]
    fn rayleigh_min_tie_prefers_power() {
        let v = rayleigh_min(&CMat::zeros(2, 2), &diag(&[1.0, 3.0])).unwrap();
        assert!((v.coefficients()[1] - c(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rayleigh_min_stays_in_range_of_singular_denominator() {
        let b = diag(&[0.0, 2.0]);
        let v = rayleigh_min(&diag(&[0.0, 5.0]), &b).unwrap();
        assert!(v.coefficients().dotc(&(&b * v.coefficients())).re > 1.0);
        assert!(matches!(rayleigh_min(&diag(&[1.0, 1.0]), &CMat::zeros(2, 2)), Err(CovshapeError::RankDeficient(_))));
    }

    #[test]
    fn eta_identity_and_normalization() {
        let s = BlockCovariance::identity(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let eta = eta_weights(&s, &ShapingVector::random(&mut rng, 2)).unwrap();
        assert!((eta - CMat::identity(4, 4) * c(0.25, 0.0)).norm() < 1e-12);

        let p = random_paths(&mut rng, 2, 5, 4);
        let v = ShapingVector::random(&mut rng, 2);
        let eta = eta_weights(&p, &v).unwrap();
        let tr: Complex64 = eta.diagonal().iter().sum();
        assert!((tr - c(1.0, 0.0)).norm() < 1e-12);
        assert!(linalg::hermitian_defect(&eta) < 1e-12);
        // entrywise definition from the blocks
        let r = p.receive_cov();
        let denom = v.coefficients().dotc(&(&r * v.coefficients())).re;
        for m in 0..5 {
            for n in 0..5 {
                let blk = p.block(m, n).unwrap().adjoint();
                let want = v.coefficients().dotc(&(blk * v.coefficients())) / denom;
                assert!((eta[(m, n)] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn objective_matrix_identity_case() {
        let s = BlockCovariance::identity(3, 4);
        let eta = CMat::identity(4, 4) * c(0.25, 0.0);
        let a = objective_matrix(&s, &eta).unwrap();
        assert!((a - CMat::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn quotient_equals_delta_and_paths_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let sk = random_paths(&mut rng, 2, 4, 3);
            let sj = random_paths(&mut rng, 2, 4, 4);
            let vk = ShapingVector::random(&mut rng, 2);
            let vj = ShapingVector::random(&mut rng, 2);
            let eta = eta_weights(&sj, &vj).unwrap();
            let a = objective_matrix(&sk, &eta).unwrap();
            assert!(linalg::hermitian_defect(&a) <= 1e-12);
            let q = quotient(&a, &sk.receive_cov(), vk.coefficients());
            let d = delta_metric(&sk, &sj, &vk, &vj).unwrap();
            assert!((q - d).abs() < 1e-10 * d);
            let a_dense = objective_matrix(&sk.to_dense(), &eta).unwrap();
            assert!((&a - a_dense).norm() < 1e-10 * a.norm());
            let sig = [sk.clone(), sj.clone()];
            let implicit = interference_matrix(&sig, &[vk.clone(), vj.clone()], 0).unwrap();
            assert!((&a - implicit).norm() < 1e-10 * a.norm());
        }
    }

    #[test]
    fn kronecker_pair_terminates_after_one_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let tk = random_psd(&mut rng, 5, 3);
        let tj = random_psd(&mut rng, 5, 3);
        let sk = kronecker_covariance(&random_psd(&mut rng, 2, 2), &tk).unwrap();
        let sj = kronecker_covariance(&random_psd(&mut rng, 2, 2), &tj).unwrap();
        let r = optimize_pair(&sk, &sj, &OptimizerSettings::default()).unwrap();
        let want = linalg::trace_product(&tk, &tj).re / (linalg::trace_re(&tk) * linalg::trace_re(&tj));
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        for d in &r.objective_trace {
            assert!((d - want).abs() < 1e-10 * want);
        }
    }

    #[test]
    fn exact_null_is_found() {
        // UE k sees BS directions e0 (via a0) and e1 (via a1); UE j only e1.
        // Steering k onto a0's orthogonal complement of a1 leaves only e0.
        let m = 4;
        let e = |i: usize| CVec::from_fn(m, |r, _| if r == i { c(1.0, 0.0) } else { ZERO });
        let a0 = CVec::from_vec(vec![c(1.0, 0.0), c(0.3, 0.2)]);
        let a1 = CVec::from_vec(vec![c(0.2, -0.1), c(1.0, 0.0)]);
        let sk = BlockCovariance::from_paths(
            2,
            m,
            vec![
                PathTerm { weight: 1.0, ue_response: a0, bs_response: e(0) },
                PathTerm { weight: 1.0, ue_response: a1.clone(), bs_response: e(1) },
            ],
        )
        .unwrap();
        let sj = BlockCovariance::from_paths(
            2,
            m,
            vec![
                PathTerm { weight: 1.0, ue_response: a1, bs_response: e(1) },
                PathTerm { weight: 0.5, ue_response: CVec::from_vec(vec![c(1.0, 0.0), c(-1.0, 0.0)]), bs_response: e(2) },
            ],
        )
        .unwrap();
        let r = optimize_pair(&sk, &sj, &OptimizerSettings::default()).unwrap();
        assert!(r.final_objective() <= 1e-10, "{:?}", r.objective_trace);
    }

    #[test]
    fn multi_reduces_to_pair_for_two_ues() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let sk = random_paths(&mut rng, 3, 6, 4);
        let sj = random_paths(&mut rng, 3, 6, 5);
        for cap in 1..=5 {
            let settings = OptimizerSettings { accuracy: 1e-300, max_iterations: cap, ..Default::default() };
            let p = optimize_pair(&sk, &sj, &settings).unwrap();
            let m = optimize_multi(&[sk.clone(), sj.clone()], &settings).unwrap();
            assert_eq!(p.vectors, m.vectors);
            assert_eq!(p.objective_trace, m.objective_trace);
        }
    }

    #[test]
    fn distributed_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let sigmas: Vec<_> = (0..3).map(|_| random_paths(&mut rng, 2, 6, 4)).collect();
        let central = optimize_multi(&sigmas, &OptimizerSettings::default()).unwrap();
        let settings = OptimizerSettings { distributed: true, ..Default::default() };
        let dist = optimize_multi(&sigmas, &settings).unwrap();
        assert_eq!(central.vectors, dist.vectors);
        assert_eq!(central.objective_trace, dist.objective_trace);
        let p = optimize_pair(&sigmas[0], &sigmas[1], &settings).unwrap();
        let q = optimize_pair(&sigmas[0], &sigmas[1], &OptimizerSettings::default()).unwrap();
        assert_eq!(p.vectors, q.vectors);
    }

    #[test]
    fn damped_updates_stay_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let sigmas: Vec<_> = (0..3).map(|_| random_paths(&mut rng, 3, 6, 4)).collect();
        let settings = OptimizerSettings { step_size: 0.4, max_iterations: 50, ..Default::default() };
        let r = optimize_multi(&sigmas, &settings).unwrap();
        for v in &r.vectors {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
        assert!(r.final_objective() <= r.objective_trace[0] + 1e-12);
    }

    #[test]
    fn oracle_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let sk = random_paths(&mut rng, 2, 4, 3);
        let sj = random_paths(&mut rng, 2, 4, 3);
        let sig = [sk.clone(), sj.clone()];
        let one = exhaustive_oracle(&sig, &OracleSettings { samples_per_ue: 1, seed: 5, cap: 10 }).unwrap();
        let d = delta_metric(&sk, &sj, &one.vectors[0], &one.vectors[1]).unwrap();
        assert!((one.objective - d).abs() < 1e-12 * d);

        let t = random_psd(&mut rng, 4, 4);
        let kk = kronecker_covariance(&random_psd(&mut rng, 2, 2), &t).unwrap();
        let kj = kronecker_covariance(&random_psd(&mut rng, 2, 2), &t).unwrap();
        let settings = OracleSettings { samples_per_ue: 20, seed: 9, cap: 1000 };
        let r = exhaustive_oracle(&[kk.clone(), kj.clone()], &settings).unwrap();
        let mut rng9 = ChaCha8Rng::seed_from_u64(9);
        let first = ShapingVector::random(&mut rng9, 2);
        assert_eq!(r.vectors[0], first);
        let want = linalg::trace_product(&t, &t).re / linalg::trace_re(&t).powi(2);
        assert!((r.objective - want).abs() < 1e-10 * want);

        let big = OracleSettings { samples_per_ue: 1000, seed: 0, cap: 1000 };
        assert!(matches!(exhaustive_oracle(&sig, &big), Err(CovshapeError::SearchTooLarge { .. })));
    }

    #[test]
    fn oracle_dense_matches_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let sig = [random_paths(&mut rng, 2, 4, 3), random_paths(&mut rng, 2, 4, 2), random_paths(&mut rng, 2, 4, 3)];
        let dense: Vec<_> = sig.iter().map(|s| s.to_dense()).collect();
        let settings = OracleSettings { samples_per_ue: 6, seed: 3, cap: 1000 };
        let a = exhaustive_oracle(&sig, &settings).unwrap();
        let b = exhaustive_oracle(&dense, &settings).unwrap();
        assert!((a.objective - b.objective).abs() < 1e-10 * a.objective);
    }

    #[test]
    fn settings_validation() {
        let bad = OptimizerSettings { step_size: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = OptimizerSettings { accuracy: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn monotone_unit_norm_phase_invariant(seed in any::<u64>(), k in 2usize..4, n in 2usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigmas: Vec<_> = (0..k).map(|_| random_paths(&mut rng, n, 6, 4)).collect();
            let init: Vec<Vec<Complex64>> = (0..k)
                .map(|_| linalg::random_unit_vector(&mut rng, n).iter().copied().collect())
                .collect();
            let settings = OptimizerSettings {
                max_iterations: 20,
                initial: InitialVectors::Given { vectors: init.clone() },
                ..Default::default()
            };
            let r = optimize_multi(&sigmas, &settings).unwrap();
            for w in r.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            for v in &r.vectors {
                prop_assert!((v.norm() - 1.0).abs() < 1e-12);
            }
            let phase = Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU));
            let rotated: Vec<Vec<Complex64>> = init.iter().map(|v| v.iter().map(|z| z * phase).collect()).collect();
            let settings2 = OptimizerSettings { initial: InitialVectors::Given { vectors: rotated }, ..settings };
            let r2 = optimize_multi(&sigmas, &settings2).unwrap();
            prop_assert_eq!(r.objective_trace.len(), r2.objective_trace.len());
            for (a, b) in r.objective_trace.iter().zip(&r2.objective_trace) {
                prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300));
            }
        }
    }
}
