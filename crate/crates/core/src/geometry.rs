//! Array geometries, multipath scenarios and channel sampling.
//!
//! A [`Scenario`] holds, for every UE, the list of propagation paths of a
//! discrete physical channel model: an optional line-of-sight path plus a set
//! of single-bounce reflected paths. Instantaneous channels are
//!
//! ```text
//! H_k = sqrt(k/(1+k)) d_k^(-b/2) c0 a(t_k) b(p_k, s_k)^H
//!     + sqrt(1/(1+k)) sum_u d_ku^(-b/2) alpha_ku a(t_ku) b(p_ku, s_ku)^H
//! ```
//!
//! with `alpha_ku ~ CN(0, 1)` and `c0` a uniform random phase, so that
//! `vec(H_k)` is zero-mean with the covariance produced by
//! [`crate::covariance::path_covariance`].

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CovshapeError, Result};
use crate::linalg::{complex_normal, CMat, CVec, ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayKind {
    Ula,
    Upa,
}

impl ArrayKind {
    fn name(self) -> &'static str {
        match self {
            ArrayKind::Ula => "ULA",
            ArrayKind::Upa => "UPA",
        }
    }
}

/// Uniform linear or planar array. For a ULA `n_elevation` is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub kind: ArrayKind,
    pub n_azimuth: usize,
    pub n_elevation: usize,
    /// Antenna spacing over wavelength.
    pub spacing: f64,
}

impl ArrayGeometry {
    pub fn ula(n: usize, spacing: f64) -> Result<Self> {
        let g = Self {
            kind: ArrayKind::Ula,
            n_azimuth: n,
            n_elevation: 1,
            spacing,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn upa(mx: usize, my: usize, spacing: f64) -> Result<Self> {
        let g = Self {
            kind: ArrayKind::Upa,
            n_azimuth: mx,
            n_elevation: my,
            spacing,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_azimuth == 0 || self.n_elevation == 0 {
            return Err(CovshapeError::InvalidGeometry(format!(
                "array needs at least one element, got {}x{}",
                self.n_azimuth, self.n_elevation
            )));
        }
        if self.kind == ArrayKind::Ula && self.n_elevation != 1 {
            return Err(CovshapeError::InvalidGeometry(format!(
                "ULA must have a single elevation row, got {}",
                self.n_elevation
            )));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(CovshapeError::InvalidGeometry(format!(
                "antenna spacing must be positive, got {}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_azimuth * self.n_elevation
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn steering(n: usize, spacing: f64, direction_cosine: f64) -> CVec {
    let k = -2.0 * PI * spacing * direction_cosine;
    CVec::from_fn(n, |i, _| {
        if i == 0 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::from_polar(1.0, k * i as f64)
        }
    })
}

/// ULA response `[1, e^{-i2πδcosθ}, ..., e^{-i2πδ(N-1)cosθ}]`.
pub fn ula_response(geometry: &ArrayGeometry, theta: f64) -> Result<CVec> {
    if geometry.kind != ArrayKind::Ula {
        return Err(CovshapeError::GeometryMismatch {
            expected: ArrayKind::Ula.name(),
            found: geometry.kind.name(),
        });
    }
    Ok(steering(geometry.n_azimuth, geometry.spacing, theta.cos()))
}

/// UPA response: azimuth factor (cos φ) ⊗ elevation factor (sin ψ).
/// A ULA is handled as a UPA with a single elevation row.
pub fn upa_response(geometry: &ArrayGeometry, phi: f64, psi: f64) -> CVec {
    let az = steering(geometry.n_azimuth, geometry.spacing, phi.cos());
    if geometry.n_elevation == 1 {
        return az;
    }
    let el = steering(geometry.n_elevation, geometry.spacing, psi.sin());
    let my = geometry.n_elevation;
    CVec::from_fn(geometry.len(), |i, _| az[i / my] * el[i % my])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationPath {
    /// Total path length in meters.
    pub distance: f64,
    /// Angle of impingement at the UE array.
    pub ue_angle: f64,
    pub bs_azimuth: f64,
    pub bs_elevation: f64,
    pub is_los: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Powers {
    /// Transmit power at the BS, watts.
    pub rho_bs: f64,
    /// Transmit power at each UE, watts.
    pub rho_ue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub sigma2_bs: f64,
    pub sigma2_ue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub bs_array: ArrayGeometry,
    pub ue_arrays: Vec<ArrayGeometry>,
    pub paths: Vec<Vec<PropagationPath>>,
    pub ricean_factor: f64,
    pub pathloss_exponent: f64,
    pub powers: Powers,
    pub noise: Noise,
    /// UE index groups that are shaped jointly; every UE appears exactly once.
    pub shaping_groups: Vec<Vec<usize>>,
}

/// One term of the path-sum channel model with its response vectors resolved.
#[derive(Debug, Clone)]
pub struct PathComponent {
    pub weight: f64,
    pub ue_response: CVec,
    pub bs_response: CVec,
    pub is_los: bool,
}

impl Scenario {
    pub fn num_ues(&self) -> usize {
        self.ue_arrays.len()
    }

    pub fn bs_antennas(&self) -> usize {
        self.bs_array.len()
    }

    pub fn ue_antennas(&self, ue: usize) -> usize {
        self.ue_arrays[ue].len()
    }

    /// Downlink SNR ρ_BS / σ²_UE.
    pub fn snr_bs(&self) -> f64 {
        self.powers.rho_bs / self.noise.sigma2_ue
    }

    /// Uplink SNR ρ_UE / σ²_BS.
    pub fn snr_ue(&self) -> f64 {
        self.powers.rho_ue / self.noise.sigma2_bs
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.ue_arrays.len();
        if k == 0 {
            return Err(CovshapeError::ScenarioInconsistency("scenario has no UEs".into()));
        }
        if self.paths.len() != k {
            return Err(CovshapeError::ScenarioInconsistency(format!(
                "{} UE arrays but {} path lists",
                k,
                self.paths.len()
            )));
        }
        self.bs_array.validate()?;
        for g in &self.ue_arrays {
            g.validate()?;
            if g.kind != ArrayKind::Ula {
                return Err(CovshapeError::GeometryMismatch {
                    expected: ArrayKind::Ula.name(),
                    found: g.kind.name(),
                });
            }
        }
        if !(self.ricean_factor >= 0.0 && self.ricean_factor.is_finite()) {
            return Err(CovshapeError::ScenarioInconsistency(format!(
                "Ricean factor must be finite and nonnegative, got {}",
                self.ricean_factor
            )));
        }
        if !self.pathloss_exponent.is_finite() {
            return Err(CovshapeError::ScenarioInconsistency("pathloss exponent must be finite".into()));
        }
        for (ue, paths) in self.paths.iter().enumerate() {
            let n_los = paths.iter().filter(|p| p.is_los).count();
            let n_refl = paths.len() - n_los;
            if self.ricean_factor == 0.0 && n_los > 0 {
                return Err(CovshapeError::ScenarioInconsistency(format!(
                    "UE {ue} has a LoS path but the Ricean factor is 0"
                )));
            }
            if self.ricean_factor > 0.0 && n_los != 1 {
                return Err(CovshapeError::ScenarioInconsistency(format!(
                    "UE {ue} needs exactly one LoS path with Ricean factor {}, found {n_los}",
                    self.ricean_factor
                )));
            }
            if n_refl == 0 && n_los == 0 {
                return Err(CovshapeError::ScenarioInconsistency(format!(
                    "UE {ue} has no propagation paths (zero channel)"
                )));
            }
            for p in paths {
                if !(p.distance > 0.0 && p.distance.is_finite()) {
                    return Err(CovshapeError::ScenarioInconsistency(format!(
                        "UE {ue} has a path with non-positive distance {}",
                        p.distance
                    )));
                }
            }
        }
        let snrs = [self.snr_bs(), self.snr_ue()];
        if snrs.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(CovshapeError::ScenarioInconsistency(format!(
                "SNRs must be finite and positive, got {snrs:?}"
            )));
        }
        let mut seen = vec![false; k];
        for group in &self.shaping_groups {
            for &ue in group {
                if ue >= k || seen[ue] {
                    return Err(CovshapeError::ScenarioInconsistency(format!(
                        "shaping groups must partition the UEs; bad entry {ue}"
                    )));
                }
                seen[ue] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(CovshapeError::ScenarioInconsistency(
                "shaping groups do not cover every UE".into(),
            ));
        }
        Ok(())
    }

    /// Average power weight of a path (pathloss and Ricean split).
    pub fn path_weight(&self, path: &PropagationPath) -> f64 {
        let kappa = self.ricean_factor;
        let loss = path.distance.powf(-self.pathloss_exponent);
        if path.is_los {
            loss * kappa / (1.0 + kappa)
        } else {
            loss / (1.0 + kappa)
        }
    }

    /// Resolve the response vectors of every path of `ue`.
    pub fn components(&self, ue: usize) -> Result<Vec<PathComponent>> {
        let paths = self.paths.get(ue).ok_or(CovshapeError::IndexOutOfRange {
            what: "UE",
            index: ue,
            len: self.paths.len(),
        })?;
        let ue_array = &self.ue_arrays[ue];
        paths
            .iter()
            .map(|p| {
                Ok(PathComponent {
                    weight: self.path_weight(p),
                    ue_response: ula_response(ue_array, p.ue_angle)?,
                    bs_response: upa_response(&self.bs_array, p.bs_azimuth, p.bs_elevation),
                    is_los: p.is_los,
                })
            })
            .collect()
    }
}

/// Draws one channel matrix `H_k` (N x M) for a UE.
pub fn sample_channel<R: Rng + ?Sized>(scenario: &Scenario, ue: usize, rng: &mut R) -> Result<CMat> {
    let comps = scenario.components(ue)?;
    if scenario.ricean_factor > 0.0 && !comps.iter().any(|c| c.is_los) {
        return Err(CovshapeError::ScenarioInconsistency(format!(
            "UE {ue} lacks a LoS path but the Ricean factor is {}",
            scenario.ricean_factor
        )));
    }
    Ok(sample_from_components(&comps, rng))
}

/// Channel draw from resolved components. Reflected paths get CN(0,1) gains,
/// the LoS path a uniform random phase.
pub fn sample_from_components<R: Rng + ?Sized>(comps: &[PathComponent], rng: &mut R) -> CMat {
    let n = comps.first().map_or(0, |c| c.ue_response.len());
    let m = comps.first().map_or(0, |c| c.bs_response.len());
    let mut h = CMat::from_element(n, m, ZERO);
    for comp in comps {
        let gain = if comp.is_los {
            Complex64::from_polar(1.0, rng.random::<f64>() * 2.0 * PI)
        } else {
            complex_normal(rng)
        };
        let amp = gain * comp.weight.sqrt();
        let left = &comp.ue_response * amp;
        let right = comp.bs_response.map(|z| z.conj());
        h.ger(Complex64::new(1.0, 0.0), &left, &right, Complex64::new(1.0, 0.0));
    }
    h
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::c;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &CVec, b: &[Complex64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).norm() < tol)
    }

    #[test]
    fn ula_broadside_is_all_ones() {
        let g = ArrayGeometry::ula(4, 0.5).unwrap();
        let a = ula_response(&g, PI / 2.0).unwrap();
        assert!(close(&a, &[c(1.0, 0.0); 4], 1e-15));
    }

    #[test]
    fn ula_endfire_two_elements() {
        let g = ArrayGeometry::ula(2, 0.5).unwrap();
        let a = ula_response(&g, 0.0).unwrap();
        assert!(close(&a, &[c(1.0, 0.0), c(-1.0, 0.0)], 1e-15));
    }

    #[test]
    fn ula_sixty_degrees() {
        let g = ArrayGeometry::ula(3, 0.5).unwrap();
        let a = ula_response(&g, PI / 3.0).unwrap();
        assert!(close(&a, &[c(1.0, 0.0), c(0.0, -1.0), c(-1.0, 0.0)], 1e-15));
    }

    #[test]
    fn ula_response_rejects_upa() {
        let g = ArrayGeometry::upa(2, 2, 0.5).unwrap();
        assert!(matches!(ula_response(&g, 0.3), Err(CovshapeError::GeometryMismatch { .. })));
    }

    #[test]
    fn upa_cases() {
        let g = ArrayGeometry::upa(2, 2, 0.5).unwrap();
        let b = upa_response(&g, PI / 2.0, 0.0);
        assert!(close(&b, &[c(1.0, 0.0); 4], 1e-15));
        let b = upa_response(&g, 0.0, PI / 2.0);
        let want = [c(1.0, 0.0), c(-1.0, 0.0), c(-1.0, 0.0), c(1.0, 0.0)];
        assert!(close(&b, &want, 1e-15));
    }

    #[test]
    fn upa_single_row_equals_ula_exactly() {
        let m = 16;
        let ula = ArrayGeometry::ula(m, 0.5).unwrap();
        let upa = ArrayGeometry::upa(m, 1, 0.5).unwrap();
        for i in 0..100 {
            let phi = i as f64 * PI / 99.0;
            let a = ula_response(&ula, phi).unwrap();
            let b = upa_response(&upa, phi, 0.0);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn responses_unit_modulus_first_one() {
        let g = ArrayGeometry::upa(4, 3, 0.37).unwrap();
        for i in 0..20 {
            let b = upa_response(&g, 0.1 * i as f64, -0.05 * i as f64);
            assert_eq!(b[0], c(1.0, 0.0));
            assert!(b.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn invalid_geometries() {
        assert!(ArrayGeometry::ula(0, 0.5).is_err());
        assert!(ArrayGeometry::ula(4, 0.0).is_err());
        assert!(ArrayGeometry::upa(4, 0, 0.5).is_err());
    }

    pub(crate) fn single_path_scenario(n: usize, m: usize) -> Scenario {
        Scenario {
            bs_array: ArrayGeometry::ula(m, 0.5).unwrap(),
            ue_arrays: vec![ArrayGeometry::ula(n, 0.5).unwrap()],
            paths: vec![vec![PropagationPath {
                distance: 1.0,
                ue_angle: 0.7,
                bs_azimuth: 1.2,
                bs_elevation: 0.0,
                is_los: false,
            }]],
            ricean_factor: 0.0,
            pathloss_exponent: 2.0,
            powers: Powers { rho_bs: 1.0, rho_ue: 0.316 },
            noise: Noise { sigma2_bs: 1e-11, sigma2_ue: 1e-11 },
            shaping_groups: vec![vec![0]],
        }
    }

    #[test]
    fn single_path_channel_is_scaled_outer_product() {
        let s = single_path_scenario(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = sample_channel(&s, 0, &mut rng).unwrap();
        let comps = s.components(0).unwrap();
        let outer = &comps[0].ue_response * comps[0].bs_response.adjoint();
        // H = alpha * a b^H: the ratio to the outer product is constant
        let alpha = h[(0, 0)] / outer[(0, 0)];
        assert!((h - outer * alpha).norm() < 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = single_path_scenario(2, 4);
        let h1 = sample_channel(&s, 0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let h2 = sample_channel(&s, 0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn validation_rules() {
        let mut s = single_path_scenario(2, 4);
        s.validate().unwrap();
        s.paths[0][0].is_los = true;
        assert!(s.validate().is_err(), "LoS with kappa = 0");
        s.ricean_factor = 2.5;
        s.validate().unwrap();
        s.paths[0][0].is_los = false;
        assert!(s.validate().is_err(), "kappa > 0 without LoS");
        assert!(matches!(
            sample_channel(&s, 0, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(CovshapeError::ScenarioInconsistency(_))
        ));
        let mut s = single_path_scenario(2, 4);
        s.paths[0].clear();
        assert!(s.validate().is_err(), "U = 0 with kappa = 0");
        let mut s = single_path_scenario(2, 4);
        s.paths[0][0].distance = 0.0;
        assert!(s.validate().is_err());
        let mut s = single_path_scenario(2, 4);
        s.shaping_groups = vec![vec![]];
        assert!(s.validate().is_err());
    }
}
