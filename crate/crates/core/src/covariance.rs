//! Channel covariance structures.
//!
//! `vec(H)` stacks the columns of the N×M channel, so block `(m, n)` of the
//! NM×NM covariance is `E[h_m h_n^H]`, the cross-covariance between BS
//! antennas `m` and `n` as seen by the UE array. A covariance is held either
//! densely or as a weighted sum of rank-one path terms
//! `w_p vec(a_p b_p^H) vec(a_p b_p^H)^H`; every operation supports both and
//! the path-sum versions never form the NM×NM matrix.
//!
//! Effective covariances are `Φ̄ = E[ḡ^H ḡ]` for the shaped row `ḡ = v^H H`,
//! i.e. the covariance of the column that enters the uplink observation.

use num_complex::Complex64;
use rand::Rng;

use crate::error::{CovshapeError, Result};
use crate::geometry::Scenario;
use crate::linalg::{self, CMat, CVec, ZERO};

/// Unit-norm UE-side statistical beamformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapingVector(CVec);

impl ShapingVector {
    /// Normalizes `coefficients` to unit norm.
    pub fn new(coefficients: CVec) -> Result<Self> {
        let norm = coefficients.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(CovshapeError::RankDeficient("shaping vector has zero norm".into()));
        }
        Ok(Self(coefficients.unscale(norm)))
    }

    /// Unit vector along antenna `index`.
    pub fn basis(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(CovshapeError::IndexOutOfRange { what: "UE antenna", index, len: n });
        }
        let mut v = CVec::zeros(n);
        v[index] = Complex64::new(1.0, 0.0);
        Ok(Self(v))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Self {
        Self(linalg::random_unit_vector(rng, n))
    }

    pub fn coefficients(&self) -> &CVec {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// `|v^H x|²`
    pub fn gain(&self, x: &CVec) -> f64 {
        self.0.dotc(x).norm_sqr()
    }
}

#[derive(Debug, Clone)]
pub struct PathTerm {
    pub weight: f64,
    pub ue_response: CVec,
    pub bs_response: CVec,
}

#[derive(Debug, Clone)]
pub enum CovarianceRepr {
    Dense(CMat),
    PathSum(Vec<PathTerm>),
}

/// NM×NM channel covariance with N×N block access.
#[derive(Debug, Clone)]
pub struct BlockCovariance {
    n: usize,
    m: usize,
    repr: CovarianceRepr,
}

#[derive(Debug, Clone)]
pub struct EffectiveCovariance {
    pub matrix: CMat,
    pub shaping: ShapingVector,
}

impl EffectiveCovariance {
    pub fn trace(&self) -> f64 {
        linalg::trace_re(&self.matrix)
    }
}

/// Outcome of a Hermitian/PSD check.
#[derive(Debug, Clone, Copy)]
pub struct PsdReport {
    pub hermitian_defect: f64,
    pub min_eigenvalue: f64,
    pub trace: f64,
}

impl PsdReport {
    pub fn passes(&self) -> bool {
        self.hermitian_defect <= 1e-10 && self.min_eigenvalue >= -1e-10 * self.trace.abs()
    }
}

impl BlockCovariance {
    pub fn from_dense(n: usize, m: usize, matrix: CMat) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(CovshapeError::InvalidGeometry("covariance needs N, M >= 1".into()));
        }
        if matrix.nrows() != n * m || matrix.ncols() != n * m {
            return Err(CovshapeError::DimensionMismatch {
                what: "dense covariance",
                expected: n * m,
                found: matrix.nrows().max(matrix.ncols()),
            });
        }
        Ok(Self { n, m, repr: CovarianceRepr::Dense(matrix) })
    }

    pub fn from_paths(n: usize, m: usize, terms: Vec<PathTerm>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(CovshapeError::InvalidGeometry("covariance needs N, M >= 1".into()));
        }
        for t in &terms {
            if t.ue_response.len() != n {
                return Err(CovshapeError::DimensionMismatch {
                    what: "path UE response",
                    expected: n,
                    found: t.ue_response.len(),
                });
            }
            if t.bs_response.len() != m {
                return Err(CovshapeError::DimensionMismatch {
                    what: "path BS response",
                    expected: m,
                    found: t.bs_response.len(),
                });
            }
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(CovshapeError::ScenarioInconsistency(format!(
                    "path weight must be finite and nonnegative, got {}",
                    t.weight
                )));
            }
        }
        Ok(Self { n, m, repr: CovarianceRepr::PathSum(terms) })
    }

    pub fn identity(n: usize, m: usize) -> Self {
        Self { n, m, repr: CovarianceRepr::Dense(CMat::identity(n * m, n * m)) }
    }

    pub fn ue_antennas(&self) -> usize {
        self.n
    }

    pub fn bs_antennas(&self) -> usize {
        self.m
    }

    pub fn repr(&self) -> &CovarianceRepr {
        &self.repr
    }

    pub fn paths(&self) -> Option<&[PathTerm]> {
        match &self.repr {
            CovarianceRepr::PathSum(t) => Some(t),
            CovarianceRepr::Dense(_) => None,
        }
    }

    /// Dense NM×NM matrix.
    pub fn dense(&self) -> CMat {
        match &self.repr {
            CovarianceRepr::Dense(d) => d.clone(),
            CovarianceRepr::PathSum(terms) => {
                let nm = self.n * self.m;
                let mut out = CMat::zeros(nm, nm);
                for t in terms {
                    // vec(a b^H) = conj(b) ⊗ a
                    let x = CVec::from_fn(nm, |i, _| t.bs_response[i / self.n].conj() * t.ue_response[i % self.n]);
                    let xc = x.map(|z| z.conj());
                    out.ger(Complex64::new(t.weight, 0.0), &x, &xc, Complex64::new(1.0, 0.0));
                }
                out
            }
        }
    }

    /// Densified copy.
    pub fn to_dense(&self) -> Self {
        Self { n: self.n, m: self.m, repr: CovarianceRepr::Dense(self.dense()) }
    }

    fn check_bs_index(&self, idx: usize) -> Result<()> {
        if idx >= self.m {
            return Err(CovshapeError::IndexOutOfRange { what: "BS antenna", index: idx, len: self.m });
        }
        Ok(())
    }

    /// Block `Σ_{mn} = E[h_m h_n^H]` (0-based indices).
    pub fn block(&self, m: usize, n: usize) -> Result<CMat> {
        self.check_bs_index(m)?;
        self.check_bs_index(n)?;
        Ok(match &self.repr {
            CovarianceRepr::Dense(d) => d.view((m * self.n, n * self.n), (self.n, self.n)).into_owned(),
            CovarianceRepr::PathSum(terms) => {
                let mut out = CMat::zeros(self.n, self.n);
                for t in terms {
                    let s = t.bs_response[m].conj() * t.bs_response[n] * t.weight;
                    let ac = t.ue_response.map(|z| z.conj());
                    out.ger(s, &t.ue_response, &ac, Complex64::new(1.0, 0.0));
                }
                out
            }
        })
    }

    pub fn trace(&self) -> f64 {
        match &self.repr {
            CovarianceRepr::Dense(d) => linalg::trace_re(d),
            CovarianceRepr::PathSum(terms) => terms
                .iter()
                .map(|t| t.weight * t.ue_response.norm_squared() * t.bs_response.norm_squared())
                .sum(),
        }
    }

    /// `Φ̄ = ((I_M ⊗ v^H) Σ (I_M ⊗ v))^T`, so `Φ̄[i, j] = v^H Σ_{ji} v`.
    pub fn effective(&self, v: &ShapingVector) -> Result<EffectiveCovariance> {
        if v.len() != self.n {
            return Err(CovshapeError::DimensionMismatch {
                what: "shaping vector",
                expected: self.n,
                found: v.len(),
            });
        }
        let matrix = match &self.repr {
            CovarianceRepr::PathSum(terms) => {
                let mut out = CMat::zeros(self.m, self.m);
                for t in terms {
                    let g = t.weight * v.gain(&t.ue_response);
                    let bc = t.bs_response.map(|z| z.conj());
                    out.ger(Complex64::new(g, 0.0), &t.bs_response, &bc, Complex64::new(1.0, 0.0));
                }
                out
            }
            CovarianceRepr::Dense(d) => {
                let vc = v.coefficients();
                let n = self.n;
                CMat::from_fn(self.m, self.m, |i, j| {
                    // v^H Σ_{ji} v
                    let blk = d.view((j * n, i * n), (n, n));
                    vc.dotc(&(blk * vc))
                })
            }
        };
        Ok(EffectiveCovariance { matrix, shaping: v.clone() })
    }

    /// `tr(Φ̄(v)) = v^H R v`.
    pub fn effective_trace(&self, v: &ShapingVector) -> Result<f64> {
        match &self.repr {
            CovarianceRepr::PathSum(terms) => {
                if v.len() != self.n {
                    return Err(CovshapeError::DimensionMismatch {
                        what: "shaping vector",
                        expected: self.n,
                        found: v.len(),
                    });
                }
                Ok(terms
                    .iter()
                    .map(|t| t.weight * v.gain(&t.ue_response) * t.bs_response.norm_squared())
                    .sum())
            }
            CovarianceRepr::Dense(_) => Ok(self.effective(v)?.trace()),
        }
    }

    /// Receive covariance `R = E[H H^H] = Σ_m Σ_{mm}`.
    pub fn receive_cov(&self) -> CMat {
        match &self.repr {
            CovarianceRepr::PathSum(terms) => {
                let mut out = CMat::zeros(self.n, self.n);
                for t in terms {
                    let s = t.weight * t.bs_response.norm_squared();
                    let ac = t.ue_response.map(|z| z.conj());
                    out.ger(Complex64::new(s, 0.0), &t.ue_response, &ac, Complex64::new(1.0, 0.0));
                }
                out
            }
            CovarianceRepr::Dense(d) => {
                let mut out = CMat::zeros(self.n, self.n);
                for m in 0..self.m {
                    out += d.view((m * self.n, m * self.n), (self.n, self.n));
                }
                out
            }
        }
    }

    /// Transmit covariance `T = E[H^H H]`, `T[m, n] = tr(Σ_{nm})`.
    pub fn transmit_cov(&self) -> CMat {
        match &self.repr {
            CovarianceRepr::PathSum(terms) => {
                let mut out = CMat::zeros(self.m, self.m);
                for t in terms {
                    let s = t.weight * t.ue_response.norm_squared();
                    let bc = t.bs_response.map(|z| z.conj());
                    out.ger(Complex64::new(s, 0.0), &t.bs_response, &bc, Complex64::new(1.0, 0.0));
                }
                out
            }
            CovarianceRepr::Dense(d) => {
                let n = self.n;
                CMat::from_fn(self.m, self.m, |i, j| {
                    (0..n).map(|k| d[(j * n + k, i * n + k)]).fold(ZERO, |a, b| a + b)
                })
            }
        }
    }

    /// Covariance of row `n` of `H` in the conjugated-column sense:
    /// entry `(m, m')` is `[Σ_{m'm}]_{nn} = E[conj(H[n,m]) H[n,m']]`.
    pub fn per_antenna_cov(&self, n: usize) -> Result<CMat> {
        if n >= self.n {
            return Err(CovshapeError::IndexOutOfRange { what: "UE antenna", index: n, len: self.n });
        }
        Ok(match &self.repr {
            CovarianceRepr::PathSum(terms) => {
                let mut out = CMat::zeros(self.m, self.m);
                for t in terms {
                    let s = t.weight * t.ue_response[n].norm_sqr();
                    let bc = t.bs_response.map(|z| z.conj());
                    out.ger(Complex64::new(s, 0.0), &t.bs_response, &bc, Complex64::new(1.0, 0.0));
                }
                out
            }
            CovarianceRepr::Dense(d) => {
                let nn = self.n;
                CMat::from_fn(self.m, self.m, |i, j| d[(j * nn + n, i * nn + n)])
            }
        })
    }

    /// Hermitian and PSD diagnostics on the dense form.
    pub fn psd_report(&self) -> PsdReport {
        let d = self.dense();
        let (vals, _) = linalg::eigh(&d);
        PsdReport {
            hermitian_defect: linalg::hermitian_defect(&d),
            min_eigenvalue: vals.first().copied().unwrap_or(0.0),
            trace: linalg::trace_re(&d),
        }
    }

    /// Gaussian draw `H` with `vec(H) ~ CN(0, Σ)`. Path-sum form scales each
    /// path by an independent CN(0, 1) gain.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CMat {
        self.sampler().sample(rng)
    }

    /// Sampler for repeated draws; a dense covariance is factored once here.
    pub fn sampler(&self) -> ChannelSampler {
        let source = match &self.repr {
            CovarianceRepr::PathSum(terms) => SamplerSource::Paths(terms.clone()),
            CovarianceRepr::Dense(d) => SamplerSource::Factor(linalg::psd_sqrt(d)),
        };
        ChannelSampler { n: self.n, m: self.m, source }
    }

    /// Trace below which an effective covariance counts as nulled.
    pub(crate) fn degenerate_threshold(&self) -> f64 {
        1e-14 * self.trace().abs()
    }
}

/// Draws channel matrices from a [`BlockCovariance`].
#[derive(Debug, Clone)]
pub struct ChannelSampler {
    n: usize,
    m: usize,
    source: SamplerSource,
}

#[derive(Debug, Clone)]
enum SamplerSource {
    /// `Σ^{1/2}`.
    Factor(CMat),
    Paths(Vec<PathTerm>),
}

impl ChannelSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CMat {
        match &self.source {
            SamplerSource::Factor(f) => {
                let x = f * linalg::complex_normal_vector(rng, self.n * self.m);
                CMat::from_column_slice(self.n, self.m, x.as_slice())
            }
            SamplerSource::Paths(terms) => {
                let mut h = CMat::zeros(self.n, self.m);
                for t in terms {
                    let gain = linalg::complex_normal(rng) * t.weight.sqrt();
                    let right = t.bs_response.map(|z| z.conj());
                    h.ger(gain, &t.ue_response, &right, Complex64::new(1.0, 0.0));
                }
                h
            }
        }
    }
}

/// Analytic covariance of `vec(H_k)` under the sampling model of
/// [`crate::geometry::sample_channel`], in path-sum form.
pub fn path_covariance(scenario: &Scenario, ue: usize) -> Result<BlockCovariance> {
    let comps = scenario.components(ue)?;
    let terms = comps
        .into_iter()
        .map(|c| PathTerm { weight: c.weight, ue_response: c.ue_response, bs_response: c.bs_response })
        .collect();
    BlockCovariance::from_paths(scenario.ue_antennas(ue), scenario.bs_antennas(), terms)
}

/// Kronecker-model covariance `Σ = T^T ⊗ R`, blocks `Σ_{mn} = conj(T[m,n]) R`.
pub fn kronecker_covariance(receive: &CMat, transmit: &CMat) -> Result<BlockCovariance> {
    if !receive.is_square() || !transmit.is_square() {
        return Err(CovshapeError::DimensionMismatch {
            what: "Kronecker factor",
            expected: receive.nrows(),
            found: receive.ncols(),
        });
    }
    let dense = linalg::kron(&transmit.transpose(), receive);
    BlockCovariance::from_dense(receive.nrows(), transmit.nrows(), dense)
}

fn effective_traces(
    sigma_k: &BlockCovariance,
    sigma_j: &BlockCovariance,
    v_k: &ShapingVector,
    v_j: &ShapingVector,
) -> Result<(f64, f64)> {
    let tk = sigma_k.effective_trace(v_k)?;
    if tk <= sigma_k.degenerate_threshold() {
        return Err(CovshapeError::DegenerateShaping { ue: 0 });
    }
    let tj = sigma_j.effective_trace(v_j)?;
    if tj <= sigma_j.degenerate_threshold() {
        return Err(CovshapeError::DegenerateShaping { ue: 1 });
    }
    Ok((tk, tj))
}

/// Variance of the normalized inter-UE interference,
/// `δ = tr(Φ̄_k Φ̄_j) / (tr Φ̄_k · tr Φ̄_j)`.
pub fn delta_metric(
    sigma_k: &BlockCovariance,
    sigma_j: &BlockCovariance,
    v_k: &ShapingVector,
    v_j: &ShapingVector,
) -> Result<f64> {
    if sigma_k.m != sigma_j.m {
        return Err(CovshapeError::DimensionMismatch {
            what: "BS antennas of UE pair",
            expected: sigma_k.m,
            found: sigma_j.m,
        });
    }
    let (tk, tj) = effective_traces(sigma_k, sigma_j, v_k, v_j)?;
    let num = match (sigma_k.paths(), sigma_j.paths()) {
        (Some(pk), Some(pj)) => {
            let gk: Vec<f64> = pk.iter().map(|t| t.weight * v_k.gain(&t.ue_response)).collect();
            let gj: Vec<f64> = pj.iter().map(|t| t.weight * v_j.gain(&t.ue_response)).collect();
            let mut acc = 0.0;
            for (p, tp) in pk.iter().enumerate() {
                if gk[p] == 0.0 {
                    continue;
                }
                for (q, tq) in pj.iter().enumerate() {
                    acc += gk[p] * gj[q] * tp.bs_response.dotc(&tq.bs_response).norm_sqr();
                }
            }
            acc
        }
        _ => {
            let ek = sigma_k.effective(v_k)?;
            let ej = sigma_j.effective(v_j)?;
            linalg::trace_product(&ek.matrix, &ej.matrix).re
        }
    };
    Ok(num.max(0.0) / (tk * tj))
}

/// Dense-only evaluation of δ through the block sums
/// `Σ_{m,n} (v_k^H Σ_{k,mn} v_k)(v_j^H Σ_{j,nm} v_j)`.
pub fn delta_metric_blockwise(
    sigma_k: &BlockCovariance,
    sigma_j: &BlockCovariance,
    v_k: &ShapingVector,
    v_j: &ShapingVector,
) -> Result<f64> {
    let (tk, tj) = effective_traces(sigma_k, sigma_j, v_k, v_j)?;
    let dk = sigma_k.dense();
    let dj = sigma_j.dense();
    let n_k = sigma_k.n;
    let n_j = sigma_j.n;
    let (vk, vj) = (v_k.coefficients(), v_j.coefficients());
    let mut acc = ZERO;
    for m in 0..sigma_k.m {
        for n in 0..sigma_k.m {
            let a = vk.dotc(&(dk.view((m * n_k, n * n_k), (n_k, n_k)) * vk));
            let b = vj.dotc(&(dj.view((n * n_j, m * n_j), (n_j, n_j)) * vj));
            acc += a * b;
        }
    }
    Ok(acc.re.max(0.0) / (tk * tj))
}

/// One sample of the normalized interference `Ω = ḡ_k ḡ_j^H / sqrt(tr Φ̄_k tr Φ̄_j)`
/// for effective channel rows `g_k`, `g_j` (stored as vectors of row entries).
pub fn omega_sample(g_k: &CVec, g_j: &CVec, phi_k: &EffectiveCovariance, phi_j: &EffectiveCovariance) -> Result<Complex64> {
    let (tk, tj) = (phi_k.trace(), phi_j.trace());
    if tk <= 0.0 {
        return Err(CovshapeError::DegenerateShaping { ue: 0 });
    }
    if tj <= 0.0 {
        return Err(CovshapeError::DegenerateShaping { ue: 1 });
    }
    // ḡ_k ḡ_j^H = Σ_m g_k[m] conj(g_j[m])
    Ok(g_j.dotc(g_k) / (tk * tj).sqrt())
}
