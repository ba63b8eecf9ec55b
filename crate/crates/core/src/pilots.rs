//! Uplink pilots and MMSE channel estimation.
//!
//! Full mode estimates every row `g_{k,n}` of `H_k` from antenna-specific
//! pilots; effective mode estimates only the shaped row `ḡ_k = v_k^H H_k`
//! from one pilot per UE. UEs in the same pilot group contaminate each
//! other's estimates.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{BlockCovariance, ShapingVector};
use crate::error::{CovshapeError, Result};
use crate::linalg::{self, CMat, CVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PilotMode {
    Full,
    Effective,
}

impl PilotMode {
    fn name(self) -> &'static str {
        match self {
            PilotMode::Full => "full",
            PilotMode::Effective => "effective",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PilotBook {
    pub mode: PilotMode,
    pub tau: usize,
    /// UE antennas per pilot matrix (1 in effective mode).
    pub rows: usize,
    /// Pilot group of each UE, 0-based.
    pub assignments: Vec<usize>,
    /// `rows × τ` pilot matrix per group.
    pub pilots: Vec<CMat>,
}

/// Unnormalized DFT basis, rows orthogonal with squared norm `τ`.
fn dft(tau: usize) -> CMat {
    CMat::from_fn(tau, tau, |r, c| {
        let k = (r * c) % tau;
        Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k as f64 / tau as f64)
    })
}

/// Pilot book with groups assigned round-robin over UE index (`k mod P`),
/// so neighbouring UEs in index order never share a pilot when `P ≥ 2`.
pub fn build_pilot_book(mode: PilotMode, k: usize, p: usize, tau: usize, n: usize) -> Result<PilotBook> {
    build_pilot_book_with(mode, (0..k).map(|u| u % p.max(1)).collect(), p, tau, n)
}

/// Pilot book with an explicit UE → group assignment.
pub fn build_pilot_book_with(
    mode: PilotMode,
    assignments: Vec<usize>,
    p: usize,
    tau: usize,
    n: usize,
) -> Result<PilotBook> {
    if p == 0 || n == 0 {
        return Err(CovshapeError::InvalidConfig("pilot book needs P >= 1 and N >= 1".into()));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= p) {
        return Err(CovshapeError::IndexOutOfRange { what: "pilot group", index: bad, len: p });
    }
    let rows = match mode {
        PilotMode::Full => n,
        PilotMode::Effective => 1,
    };
    let required = p * rows;
    if tau < required {
        return Err(CovshapeError::PilotTooShort { mode: mode.name(), tau, required });
    }
    let basis = dft(tau);
    let scale = 1.0 / (rows as f64).sqrt();
    let pilots = (0..p)
        .map(|g| basis.rows(g * rows, rows).map(|z| z * scale))
        .collect();
    Ok(PilotBook { mode, tau, rows, assignments, pilots })
}

impl PilotBook {
    pub fn num_ues(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_groups(&self) -> usize {
        self.pilots.len()
    }

    pub fn pilot_of(&self, ue: usize) -> &CMat {
        &self.pilots[self.assignments[ue]]
    }

    /// UEs sharing UE `k`'s pilot, `k` excluded.
    pub fn contaminators(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let g = self.assignments[k];
        self.assignments.iter().enumerate().filter(move |&(j, &a)| j != k && a == g).map(|(j, _)| j)
    }

    pub fn shares_pilot(&self, k: usize, j: usize) -> bool {
        self.assignments[k] == self.assignments[j]
    }

    /// Pilot energy sent by one UE, `‖P_p‖²_F` (equal to `τ` in both modes).
    pub fn energy_per_ue(&self) -> f64 {
        self.pilots.first().map(|p| p.norm_squared()).unwrap_or(0.0)
    }

    /// Largest deviation from the orthogonality conditions:
    /// `P_p P_p^H = (τ/rows) I`, `P_p P_q^H = 0`.
    pub fn orthogonality_defect(&self) -> f64 {
        let target = self.tau as f64 / self.rows as f64;
        let mut worst = 0.0f64;
        for (a, pa) in self.pilots.iter().enumerate() {
            for (b, pb) in self.pilots.iter().enumerate() {
                let g = pa * pb.adjoint();
                let want = if a == b { CMat::identity(self.rows, self.rows) * Complex64::new(target, 0.0) } else { CMat::zeros(self.rows, self.rows) };
                worst = worst.max((g - want).norm() / target);
            }
        }
        worst
    }
}

/// Uplink pilot observation `Y = Σ_k √ρ_UE X_k^H P_{p(k)} + Z` with `X_k = H_k`
/// in full mode and `X_k = v_k^H H_k` in effective mode.
pub fn simulate_pilot_rx<R: Rng + ?Sized>(
    channels: &[CMat],
    book: &PilotBook,
    shaping: Option<&[ShapingVector]>,
    rho_ue: f64,
    sigma2_bs: f64,
    rng: &mut R,
) -> Result<CMat> {
    if channels.len() != book.num_ues() {
        return Err(CovshapeError::DimensionMismatch {
            what: "channels vs pilot assignments",
            expected: book.num_ues(),
            found: channels.len(),
        });
    }
    let m = channels.first().map(|h| h.ncols()).unwrap_or(0);
    let mut y = linalg::complex_normal_matrix(rng, m, book.tau) * Complex64::new(sigma2_bs.sqrt(), 0.0);
    let amp = Complex64::new(rho_ue.sqrt(), 0.0);
    for (k, h) in channels.iter().enumerate() {
        if h.ncols() != m {
            return Err(CovshapeError::DimensionMismatch { what: "BS antennas", expected: m, found: h.ncols() });
        }
        let rows = transmitted_rows(h, book.mode, shaping, k)?;
        if rows.nrows() != book.rows {
            return Err(CovshapeError::DimensionMismatch {
                what: "pilot rows",
                expected: book.rows,
                found: rows.nrows(),
            });
        }
        y += rows.adjoint() * book.pilot_of(k) * amp;
    }
    Ok(y)
}

fn transmitted_rows(h: &CMat, mode: PilotMode, shaping: Option<&[ShapingVector]>, k: usize) -> Result<CMat> {
    match (mode, shaping) {
        (PilotMode::Full, None) => Ok(h.clone()),
        (PilotMode::Effective, Some(v)) => {
            let v = v.get(k).ok_or(CovshapeError::IndexOutOfRange { what: "shaping vector", index: k, len: v.len() })?;
            effective_row(h, v)
        }
        (PilotMode::Full, Some(_)) => Err(CovshapeError::InvalidConfig("full-mode pilots take no shaping vectors".into())),
        (PilotMode::Effective, None) => Err(CovshapeError::InvalidConfig("effective-mode pilots need shaping vectors".into())),
    }
}

/// `ḡ = v^H H` as a `1 × M` matrix.
pub fn effective_row(h: &CMat, v: &ShapingVector) -> Result<CMat> {
    if v.len() != h.nrows() {
        return Err(CovshapeError::DimensionMismatch { what: "shaping vector", expected: h.nrows(), found: v.len() });
    }
    let row = v.coefficients().adjoint() * h;
    Ok(CMat::from_iterator(1, h.ncols(), row.iter().copied()))
}

/// Estimated channels, one `rows × M` matrix per UE: `Ĥ_k` in full mode,
/// the row `ĝ̄_k` in effective mode.
#[derive(Debug, Clone)]
pub struct EstimateSet {
    pub mode: PilotMode,
    pub rows: Vec<CMat>,
}

impl EstimateSet {
    /// All estimated rows stacked, UE by UE.
    pub fn stacked(&self) -> CMat {
        let total: usize = self.rows.iter().map(|r| r.nrows()).sum();
        let m = self.rows.first().map(|r| r.ncols()).unwrap_or(0);
        let mut out = CMat::zeros(total, m);
        let mut at = 0;
        for r in &self.rows {
            out.rows_mut(at, r.nrows()).copy_from(r);
            at += r.nrows();
        }
        out
    }
}

/// Model-matched MMSE filters `F = s · Φ Q^{-1}`, precomputed once per set of
/// statistics and applied to each observation.
#[derive(Debug, Clone)]
pub struct MmseEstimator {
    book: PilotBook,
    /// `filters[k][n]` for UE `k`, row `n`.
    filters: Vec<Vec<CMat>>,
    /// `q[k][n]`, the normalized covariance of the correlated observation.
    q: Vec<Vec<CMat>>,
    scale: f64,
}

impl MmseEstimator {
    /// Full mode from the channel covariances: per row `n`, `Φ_{k,nn}` and
    /// `Q_{k,nn} = Φ_{k,nn} + Σ_{j∈S_p∖k} Φ_{j,nn} + N/(τ ϱ_UE) I`.
    pub fn full(book: &PilotBook, sigmas: &[BlockCovariance], rho_ue: f64, sigma2_bs: f64) -> Result<Self> {
        if book.mode != PilotMode::Full {
            return Err(CovshapeError::InvalidConfig("full estimator needs a full-mode pilot book".into()));
        }
        let n = book.rows;
        let per_row: Vec<Vec<CMat>> = sigmas
            .iter()
            .map(|s| {
                if s.ue_antennas() != n {
                    return Err(CovshapeError::DimensionMismatch { what: "UE antennas", expected: n, found: s.ue_antennas() });
                }
                (0..n).map(|r| s.per_antenna_cov(r)).collect()
            })
            .collect::<Result<_>>()?;
        let noise = n as f64 * sigma2_bs / (book.tau as f64 * rho_ue);
        let scale = n as f64 / (book.tau as f64 * rho_ue.sqrt());
        Self::build(book, &per_row, noise, scale)
    }

    /// Effective mode from `Φ̄_k`: `Q_k = Φ̄_k + Σ_{j∈S_p∖k} Φ̄_j + 1/(τ ϱ_UE) I`.
    pub fn effective(book: &PilotBook, phis: &[CMat], rho_ue: f64, sigma2_bs: f64) -> Result<Self> {
        if book.mode != PilotMode::Effective {
            return Err(CovshapeError::InvalidConfig("effective estimator needs an effective-mode pilot book".into()));
        }
        let per_row: Vec<Vec<CMat>> = phis.iter().map(|p| vec![p.clone()]).collect();
        let noise = sigma2_bs / (book.tau as f64 * rho_ue);
        let scale = 1.0 / (book.tau as f64 * rho_ue.sqrt());
        Self::build(book, &per_row, noise, scale)
    }

    fn build(book: &PilotBook, covs: &[Vec<CMat>], noise: f64, scale: f64) -> Result<Self> {
        if covs.len() != book.num_ues() {
            return Err(CovshapeError::DimensionMismatch {
                what: "covariances vs pilot assignments",
                expected: book.num_ues(),
                found: covs.len(),
            });
        }
        if !(noise.is_finite() && noise >= 0.0 && scale.is_finite()) {
            return Err(CovshapeError::InvalidConfig(format!("invalid pilot SNR (noise term {noise})")));
        }
        let m = covs.first().and_then(|c| c.first()).map(|c| c.nrows()).unwrap_or(0);
        let mut filters = Vec::with_capacity(covs.len());
        let mut qs = Vec::with_capacity(covs.len());
        for k in 0..covs.len() {
            let mut fk = Vec::with_capacity(book.rows);
            let mut qk = Vec::with_capacity(book.rows);
            for r in 0..book.rows {
                let mut q = covs[k][r].clone();
                for j in book.contaminators(k) {
                    q += &covs[j][r];
                }
                for i in 0..m {
                    q[(i, i)] += Complex64::new(noise, 0.0);
                }
                // Φ Q^{-1} = (Q^{-1} Φ)^H for Hermitian Φ, Q
                let f = linalg::hpd_solve(&q, &covs[k][r])
                    .map_err(|_| CovshapeError::NotPositiveDefinite(format!("Q for UE {k}, row {r}")))?
                    .adjoint();
                fk.push(f);
                qk.push(q);
            }
            filters.push(fk);
            qs.push(qk);
        }
        Ok(Self { book: book.clone(), filters, q: qs, scale })
    }

    pub fn book(&self) -> &PilotBook {
        &self.book
    }

    /// `Q` for UE `k`, row `n` (row 0 in effective mode).
    pub fn q_matrix(&self, k: usize, n: usize) -> &CMat {
        &self.q[k][n]
    }

    pub fn estimate(&self, y: &CMat) -> Result<EstimateSet> {
        if y.ncols() != self.book.tau {
            return Err(CovshapeError::DimensionMismatch { what: "pilot observation length", expected: self.book.tau, found: y.ncols() });
        }
        let rows = (0..self.book.num_ues())
            .map(|k| {
                let p = self.book.pilot_of(k);
                let m = y.nrows();
                let mut out = CMat::zeros(self.book.rows, m);
                for r in 0..self.book.rows {
                    // Y P_p^H e_r
                    let corr: CVec = y * p.row(r).adjoint();
                    let col = &self.filters[k][r] * corr * Complex64::new(self.scale, 0.0);
                    out.row_mut(r).copy_from(&col.adjoint());
                }
                out
            })
            .collect();
        Ok(EstimateSet { mode: self.book.mode, rows })
    }
}

/// One-shot MMSE estimate; builds the filters and applies them to `y`.
/// Full mode takes channel covariances, effective mode the effective ones
/// built from `shaping`.
pub fn mmse_estimate(
    y: &CMat,
    book: &PilotBook,
    sigmas: &[BlockCovariance],
    shaping: Option<&[ShapingVector]>,
    rho_ue: f64,
    sigma2_bs: f64,
) -> Result<EstimateSet> {
    let est = match (book.mode, shaping) {
        (PilotMode::Full, _) => MmseEstimator::full(book, sigmas, rho_ue, sigma2_bs)?,
        (PilotMode::Effective, Some(v)) => {
            let phis = sigmas
                .iter()
                .zip(v)
                .map(|(s, v)| s.effective(v).map(|e| e.matrix))
                .collect::<Result<Vec<_>>>()?;
            MmseEstimator::effective(book, &phis, rho_ue, sigma2_bs)?
        }
        (PilotMode::Effective, None) => {
            return Err(CovshapeError::InvalidConfig("effective-mode estimation needs shaping vectors".into()))
        }
    };
    est.estimate(y)
}

/// Running per-UE NMSE. Each trial contributes the row-averaged
/// `‖ĝ − g‖² / ‖g‖²`; trials with a zero-norm truth row are skipped and counted.
#[derive(Debug, Clone, Default)]
pub struct NmseAccumulator {
    sums: Vec<f64>,
    counts: Vec<usize>,
    pub excluded: usize,
}

impl NmseAccumulator {
    pub fn new(k: usize) -> Self {
        Self { sums: vec![0.0; k], counts: vec![0; k], excluded: 0 }
    }

    /// `truths[k]` must have the same shape as `estimates.rows[k]`.
    pub fn add(&mut self, estimates: &EstimateSet, truths: &[CMat]) -> Result<()> {
        for (k, (e, t)) in estimates.rows.iter().zip(truths).enumerate() {
            if let Some(v) = trial_nmse(e, t)? {
                self.sums[k] += v;
                self.counts[k] += 1;
            } else {
                self.excluded += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for k in 0..self.sums.len() {
            self.sums[k] += other.sums[k];
            self.counts[k] += other.counts[k];
        }
        self.excluded += other.excluded;
    }

    pub fn per_ue(&self) -> Vec<f64> {
        self.sums.iter().zip(&self.counts).map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect()
    }
}

/// Row-averaged NMSE of one trial, `None` when a truth row is zero.
pub fn trial_nmse(estimate: &CMat, truth: &CMat) -> Result<Option<f64>> {
    if estimate.shape() != truth.shape() {
        return Err(CovshapeError::DimensionMismatch { what: "estimate vs truth rows", expected: truth.nrows(), found: estimate.nrows() });
    }
    let mut acc = 0.0;
    for r in 0..truth.nrows() {
        let den = truth.row(r).norm_squared();
        if den == 0.0 {
            return Ok(None);
        }
        acc += (estimate.row(r) - truth.row(r)).norm_squared() / den;
    }
    Ok(Some(acc / truth.nrows() as f64))
}

/// Per-UE NMSE over a batch of trials.
pub fn nmse(estimates: &[EstimateSet], truths: &[Vec<CMat>]) -> Result<Vec<f64>> {
    let k = estimates.first().map(|e| e.rows.len()).unwrap_or(0);
    let mut acc = NmseAccumulator::new(k);
    for (e, t) in estimates.iter().zip(truths) {
        acc.add(e, t)?;
    }
    Ok(acc.per_ue())
}
