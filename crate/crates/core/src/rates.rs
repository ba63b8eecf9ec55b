//! Precoding, combining and rate evaluation.
//!
//! Instantaneous rates follow the ratio form with `ϱ_BS = ρ_BS / σ²_UE`;
//! the closed-form effective SINRs assume MRT and Gaussian effective
//! channels.

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::covariance::{BlockCovariance, ShapingVector};
use crate::error::{CovshapeError, Result};
use crate::linalg::{self, CMat};
use crate::pilots::{effective_row, simulate_pilot_rx, EstimateSet, MmseEstimator, PilotBook};

#[derive(Debug, Clone)]
pub struct PrecodingMatrix {
    pub matrix: CMat,
}

impl PrecodingMatrix {
    /// Realized `‖W‖_F`.
    pub fn norm(&self) -> f64 {
        self.matrix.norm()
    }

    pub fn column(&self, i: usize) -> CMat {
        self.matrix.columns(i, 1).into_owned()
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RateBreakdown {
    /// Per stream, UE by UE.
    pub sinr: Vec<f64>,
    pub stream_rates: Vec<f64>,
    pub per_ue: Vec<f64>,
    pub total: f64,
}

impl RateBreakdown {
    fn from_sinr(sinr: Vec<f64>, streams_per_ue: &[usize]) -> Self {
        let stream_rates: Vec<f64> = sinr.iter().map(|&g| (1.0 + g.max(0.0)).log2()).collect();
        let mut per_ue = Vec::with_capacity(streams_per_ue.len());
        let mut at = 0;
        for &l in streams_per_ue {
            per_ue.push(stream_rates[at..at + l].iter().sum());
            at += l;
        }
        let total = per_ue.iter().sum();
        Self { sinr, stream_rates, per_ue, total }
    }

    /// Multiply every rate by `factor` (time-sharing pre-log).
    pub fn scaled(mut self, factor: f64) -> Self {
        for r in self.stream_rates.iter_mut().chain(self.per_ue.iter_mut()) {
            *r *= factor;
        }
        self.total *= factor;
        self
    }
}

/// `W = Ĥ̄^H / sqrt(E‖H̄‖²_F)`, with the statistical energy `Σ_k tr Φ̄_k`
/// supplied by the caller.
pub fn mrt_precoder(estimates: &EstimateSet, channel_energy: f64) -> Result<PrecodingMatrix> {
    if !(channel_energy > 0.0 && channel_energy.is_finite()) {
        return Err(CovshapeError::InvalidConfig(format!("MRT normalizer must be positive, got {channel_energy}")));
    }
    Ok(PrecodingMatrix { matrix: estimates.stacked().adjoint().unscale(channel_energy.sqrt()) })
}

/// Regularized MMSE precoder `Ĥ^H (Ĥ Ĥ^H + (L/ϱ_BS) I_L)^{-1}`, scaled to
/// unit Frobenius norm.
pub fn mmse_precoder(estimates: &EstimateSet, rho_bs: f64, sigma2_ue: f64) -> Result<PrecodingMatrix> {
    let h = estimates.stacked();
    let l = h.nrows();
    let mut gram = &h * h.adjoint();
    let reg = l as f64 * sigma2_ue / rho_bs;
    for i in 0..l {
        gram[(i, i)] += Complex64::new(reg, 0.0);
    }
    let w = match linalg::hpd_inverse(&gram) {
        Ok(inv) => h.adjoint() * inv,
        // only reachable for a noiseless downlink with rank-deficient estimates
        Err(_) => h.adjoint() * pseudo_inverse_hermitian(&gram),
    };
    let norm = w.norm();
    let matrix = if norm > 0.0 { w.unscale(norm) } else { w };
    Ok(PrecodingMatrix { matrix })
}

fn pseudo_inverse_hermitian(a: &CMat) -> CMat {
    let (vals, vecs) = linalg::eigh(a);
    let top = vals.iter().fold(0.0f64, |x, &y| x.max(y.abs()));
    let mut out = CMat::zeros(a.nrows(), a.ncols());
    for (i, &v) in vals.iter().enumerate() {
        if v > 1e-12 * top {
            let col = vecs.column(i);
            out += col * col.adjoint() * Complex64::new(1.0 / v, 0.0);
        }
    }
    out
}

/// Per-stream MMSE combiners for UE `k`, whose streams occupy columns
/// `first .. first + count` of `W`, from the true channel `H_k`.
pub fn ue_combiner_sm(
    h: &CMat,
    precoder: &PrecodingMatrix,
    first: usize,
    count: usize,
    rho_bs: f64,
    sigma2_ue: f64,
) -> Result<CMat> {
    if first + count > precoder.matrix.ncols() {
        return Err(CovshapeError::IndexOutOfRange { what: "stream", index: first + count, len: precoder.matrix.ncols() });
    }
    let hw = h * &precoder.matrix;
    let mut c = &hw * hw.adjoint() * Complex64::new(rho_bs, 0.0);
    for i in 0..h.nrows() {
        c[(i, i)] += Complex64::new(sigma2_ue, 0.0);
    }
    linalg::hpd_solve(&c, &hw.columns(first, count).into_owned())
}

/// Sum rate of spatial multiplexing: stream `ℓ` of UE `k` is decoded with
/// column `ℓ` of `combiners[k]` against column `(k, ℓ)` of `W`.
pub fn sum_rate_sm(
    channels: &[CMat],
    precoder: &PrecodingMatrix,
    combiners: &[CMat],
    streams_per_ue: &[usize],
    rho_bs: f64,
    sigma2_ue: f64,
) -> Result<RateBreakdown> {
    let total_streams: usize = streams_per_ue.iter().sum();
    if total_streams != precoder.matrix.ncols() || channels.len() != streams_per_ue.len() || combiners.len() != channels.len() {
        return Err(CovshapeError::DimensionMismatch {
            what: "streams vs precoder columns",
            expected: precoder.matrix.ncols(),
            found: total_streams,
        });
    }
    let inv_snr = sigma2_ue / rho_bs;
    let mut sinr = Vec::with_capacity(total_streams);
    let mut at = 0;
    for (k, h) in channels.iter().enumerate() {
        let hw = h * &precoder.matrix;
        for l in 0..streams_per_ue[k] {
            let v = combiners[k].column(l);
            let gains = v.adjoint() * &hw;
            let own = at + l;
            let signal = gains[own].norm_sqr();
            let interference: f64 = gains.iter().enumerate().filter(|&(i, _)| i != own).map(|(_, z)| z.norm_sqr()).sum();
            sinr.push(ratio(signal, interference + v.norm_squared() * inv_snr));
        }
        at += streams_per_ue[k];
    }
    Ok(RateBreakdown::from_sinr(sinr, streams_per_ue))
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Sum rate of covariance shaping for effective rows `ḡ_k` (each `1 × M`).
pub fn sum_rate_cs(
    effective_rows: &[CMat],
    precoder: &PrecodingMatrix,
    shaping: &[ShapingVector],
    rho_bs: f64,
    sigma2_ue: f64,
) -> Result<RateBreakdown> {
    let k_count = effective_rows.len();
    if precoder.matrix.ncols() != k_count || shaping.len() != k_count {
        return Err(CovshapeError::DimensionMismatch { what: "UEs vs precoder columns", expected: k_count, found: precoder.matrix.ncols() });
    }
    let inv_snr = sigma2_ue / rho_bs;
    let sinr = effective_rows
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let gains = g * &precoder.matrix;
            let signal = gains[k].norm_sqr();
            let interference: f64 = gains.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, z)| z.norm_sqr()).sum();
            ratio(signal, interference + shaping[k].norm().powi(2) * inv_snr)
        })
        .collect();
    Ok(RateBreakdown::from_sinr(sinr, &vec![1; k_count]))
}

/// `Q_k = Φ̄_k + Σ_{j∈S_p∖k} Φ̄_j + 1/(τ ϱ_UE) I` for every UE.
pub fn effective_q(phis: &[CMat], book: &PilotBook, snr_ue: f64) -> Vec<CMat> {
    let noise = 1.0 / (book.tau as f64 * snr_ue);
    (0..phis.len())
        .map(|k| {
            let mut q = phis[k].clone();
            for j in book.contaminators(k) {
                q += &phis[j];
            }
            for i in 0..q.nrows() {
                q[(i, i)] += Complex64::new(noise, 0.0);
            }
            q
        })
        .collect()
}

/// Closed-form effective SINR under MRT with MMSE estimates and pilot
/// contamination. `shaping_norms[k]` is `‖v_k‖`.
pub fn effective_sinr_imperfect(
    phis: &[CMat],
    book: &PilotBook,
    snr_ue: f64,
    snr_bs: f64,
    shaping_norms: &[f64],
) -> Result<Vec<f64>> {
    let qs = effective_q(phis, book, snr_ue);
    // E_j = Q_j^{-1} Φ̄_j, D_j = Φ̄_j Q_j^{-1} Φ̄_j
    let e: Vec<CMat> = qs.iter().zip(phis).map(|(q, p)| linalg::hpd_solve(q, p)).collect::<Result<_>>()?;
    let d: Vec<CMat> = phis.iter().zip(&e).map(|(p, e)| p * e).collect();
    let energy: f64 = phis.iter().map(linalg::trace_re).sum();
    Ok((0..phis.len())
        .map(|k| {
            let signal = linalg::trace_re(&d[k]).powi(2);
            let spread: f64 = d.iter().map(|dj| linalg::trace_product(&phis[k], dj).re).sum();
            let contamination: f64 = book.contaminators(k).map(|j| linalg::trace_product(&phis[k], &e[j]).norm_sqr()).sum();
            let noise = shaping_norms[k].powi(2) * energy / snr_bs;
            ratio(signal, spread + contamination + noise)
        })
        .collect())
}

/// Closed-form effective SINR under MRT with perfect estimates. The sum over
/// `j` includes `j = k`.
pub fn effective_sinr_perfect(phis: &[CMat], snr_bs: f64, shaping_norms: &[f64]) -> Vec<f64> {
    let energy: f64 = phis.iter().map(linalg::trace_re).sum();
    (0..phis.len())
        .map(|k| {
            let signal = linalg::trace_re(&phis[k]).powi(2);
            let spread: f64 = phis.iter().map(|pj| linalg::trace_product(&phis[k], pj).re).sum();
            ratio(signal, spread + shaping_norms[k].powi(2) * energy / snr_bs)
        })
        .collect()
}

pub fn ergodic_rate_lb(gammas: &[f64]) -> f64 {
    gammas.iter().map(|&g| (1.0 + g.max(0.0)).log2()).sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentCheck {
    pub name: String,
    pub analytic: f64,
    pub empirical: f64,
    pub stderr: f64,
}

impl MomentCheck {
    /// `|empirical − analytic|` in standard errors.
    pub fn z_score(&self) -> f64 {
        let diff = (self.empirical - self.analytic).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.stderr
        }
    }

    pub fn within(&self, sigmas: f64) -> bool {
        self.z_score() <= sigmas
    }
}

#[derive(Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    fn stderr(&self) -> f64 {
        let n = self.n as f64;
        let var = ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }

    fn check(&self, name: String, analytic: f64) -> MomentCheck {
        MomentCheck { name, analytic, empirical: self.mean(), stderr: self.stderr() }
    }
}

/// Monte-Carlo checks of the moments behind the closed-form SINR.
///
/// Channels are Gaussian draws from `sigmas`, shaped by `shaping`, sent
/// through the pilot phase of `book` and estimated with model-matched MMSE.
/// The last entry checks `E[x x^H A x x^H] = A + tr(A) I` for `x ~ CN(0, I_M)`
/// and a random Hermitian `A`, reporting the worst entry.
pub fn moment_oracles<R: Rng + ?Sized>(
    sigmas: &[BlockCovariance],
    shaping: &[ShapingVector],
    book: &PilotBook,
    rho_ue: f64,
    sigma2_bs: f64,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<MomentCheck>> {
    if trials < 2 {
        return Err(CovshapeError::InvalidConfig("moment oracles need at least 2 trials".into()));
    }
    let k_count = sigmas.len();
    let phis: Vec<CMat> = sigmas
        .iter()
        .zip(shaping)
        .map(|(s, v)| s.effective(v).map(|e| e.matrix))
        .collect::<Result<_>>()?;
    let est = MmseEstimator::effective(book, &phis, rho_ue, sigma2_bs)?;
    let qs: Vec<&CMat> = (0..k_count).map(|k| est.q_matrix(k, 0)).collect();
    let e: Vec<CMat> = qs.iter().zip(&phis).map(|(q, p)| linalg::hpd_solve(q, p)).collect::<Result<_>>()?;
    let d: Vec<CMat> = phis.iter().zip(&e).map(|(p, e)| p * e).collect();

    let mean_gain: Vec<f64> = d.iter().map(linalg::trace_re).collect();
    let mut energy = Moments::default();
    let mut gain: Vec<Moments> = (0..k_count).map(|_| Moments::default()).collect();
    let mut var: Vec<Moments> = (0..k_count).map(|_| Moments::default()).collect();
    let mut cross: Vec<Vec<Moments>> = (0..k_count).map(|_| (0..k_count).map(|_| Moments::default()).collect()).collect();

    let samplers: Vec<_> = sigmas.iter().map(|s| s.sampler()).collect();
    for _ in 0..trials {
        let channels: Vec<CMat> = samplers.iter().map(|s| s.sample(rng)).collect();
        let rows: Vec<CMat> = channels.iter().zip(shaping).map(|(h, v)| effective_row(h, v)).collect::<Result<_>>()?;
        let y = simulate_pilot_rx(&channels, book, Some(shaping), rho_ue, sigma2_bs, rng)?;
        let hat = est.estimate(&y)?;
        energy.push(rows.iter().map(|r| r.norm_squared()).sum());
        for k in 0..k_count {
            for j in 0..k_count {
                let z = (&rows[k] * hat.rows[j].adjoint())[(0, 0)];
                if k == j {
                    gain[k].push(z.re);
                    var[k].push((z - Complex64::new(mean_gain[k], 0.0)).norm_sqr());
                } else {
                    cross[k][j].push(z.norm_sqr());
                }
            }
        }
    }

    let mut out = vec![energy.check("E|H|_F^2".into(), phis.iter().map(linalg::trace_re).sum())];
    for k in 0..k_count {
        out.push(gain[k].check(format!("E[g{k} ghat{k}^H]"), mean_gain[k]));
        out.push(var[k].check(format!("V[g{k} ghat{k}^H]"), linalg::trace_product(&phis[k], &d[k]).re));
    }
    for k in 0..k_count {
        for j in (0..k_count).filter(|&j| j != k) {
            let mut analytic = linalg::trace_product(&phis[k], &d[j]).re;
            let label = if book.shares_pilot(k, j) {
                analytic += linalg::trace_product(&phis[k], &e[j]).norm_sqr();
                "shared pilot"
            } else {
                "orthogonal pilots"
            };
            out.push(cross[k][j].check(format!("E|g{k} ghat{j}^H|^2 ({label})"), analytic));
        }
    }
    let m = phis.first().map(|p| p.nrows()).unwrap_or(1);
    out.push(gaussian_fourth_moment(m, trials, rng));
    Ok(out)
}

fn gaussian_fourth_moment<R: Rng + ?Sized>(m: usize, trials: usize, rng: &mut R) -> MomentCheck {
    let a = linalg::hermitian_part(&linalg::complex_normal_matrix(rng, m, m));
    let tr = linalg::trace_re(&a);
    let mut acc: Vec<Moments> = (0..m * m).map(|_| Moments::default()).collect();
    for _ in 0..trials {
        let x = linalg::complex_normal_vector(rng, m);
        let s = x.dotc(&(&a * &x));
        for c in 0..m {
            for r in 0..m {
                acc[c * m + r].push((x[r] * s * x[c].conj()).re);
            }
        }
    }
    let mut worst: Option<MomentCheck> = None;
    for c in 0..m {
        for r in 0..m {
            let analytic = a[(r, c)].re + if r == c { tr } else { 0.0 };
            let chk = acc[c * m + r].check(format!("E[xx^H A xx^H] entry ({r},{c})"), analytic);
            if worst.as_ref().is_none_or(|w| chk.z_score() > w.z_score()) {
                worst = Some(chk);
            }
        }
    }
    worst.expect("m >= 1")
}
