//! JSON scenario files described by point positions.
//!
//! A file places the BS, the UEs and a set of point scatterers in meters.
//! Paths are single-bounce: BS → scatterer → UE, with length
//! `|BS - s| + |s - UE|`, BS angles taken from the BS→scatterer segment and
//! the UE angle from the UE→scatterer segment. A LoS path is added when
//! `kappa > 0`.
//!
//! Angles are measured in the horizontal plane against each array's axis
//! (`cos φ = u·axis`), and the BS elevation angle is the signed angle of the
//! BS→scatterer direction above the horizontal (`sin ψ = u_z`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CovshapeError, Result};
use crate::geometry::{ArrayGeometry, ArrayKind, Noise, Powers, PropagationPath, Scenario};
use crate::linalg::dbm_to_watts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsSpec {
    pub kind: ArrayKind,
    pub mx: usize,
    #[serde(default = "one")]
    pub my: usize,
    #[serde(default = "half")]
    pub spacing: f64,
    pub position: Vec<f64>,
    /// Horizontal array axis; defaults to +y.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeSpec {
    pub position: Vec<f64>,
    pub n_antennas: usize,
    #[serde(default = "half")]
    pub spacing: f64,
    /// Horizontal array axis; defaults to +y.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<Vec<f64>>,
    /// Indices of the scatterers this UE sees; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scatterers: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSpec {
    pub rho_bs_dbm: f64,
    pub rho_ue_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma2_bs_dbm: f64,
    pub sigma2_ue_dbm: f64,
}

impl Default for PowerSpec {
    fn default() -> Self {
        Self { rho_bs_dbm: 30.0, rho_ue_dbm: 25.0 }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma2_bs_dbm: -80.0, sigma2_ue_dbm: -80.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    pub bs: BsSpec,
    pub ues: Vec<UeSpec>,
    #[serde(default)]
    pub scatterers: Vec<Vec<f64>>,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "two")]
    pub beta: f64,
    #[serde(default)]
    pub powers: PowerSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// UE groups shaped independently of each other; one group when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shaping_groups: Option<Vec<Vec<usize>>>,
}

fn one() -> usize {
    1
}
fn half() -> f64 {
    0.5
}
fn two() -> f64 {
    2.0
}

type Point = [f64; 3];

fn point(v: &[f64], what: &str) -> Result<Point> {
    match v.len() {
        2 => Ok([v[0], v[1], 0.0]),
        3 => Ok([v[0], v[1], v[2]]),
        n => Err(CovshapeError::InvalidConfig(format!(
            "{what} position must have 2 or 3 coordinates, got {n}"
        ))),
    }
}

fn axis(v: Option<&Vec<f64>>, what: &str) -> Result<[f64; 2]> {
    let Some(v) = v else {
        return Ok([0.0, 1.0]);
    };
    if v.len() < 2 {
        return Err(CovshapeError::InvalidConfig(format!("{what} axis needs x and y components")));
    }
    let n = v[0].hypot(v[1]);
    if n == 0.0 {
        return Err(CovshapeError::InvalidConfig(format!("{what} axis must be nonzero")));
    }
    Ok([v[0] / n, v[1] / n])
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Horizontal angle between `dir` and `axis`, in [0, π].
fn horizontal_angle(dir: Point, axis: [f64; 2]) -> f64 {
    let h = dir[0].hypot(dir[1]);
    if h == 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    ((dir[0] * axis[0] + dir[1] * axis[1]) / h).clamp(-1.0, 1.0).acos()
}

fn elevation(dir: Point) -> f64 {
    (dir[2] / norm(dir)).clamp(-1.0, 1.0).asin()
}

impl ScenarioFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CovshapeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| CovshapeError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| CovshapeError::Json {
            path: "<inline>".into(),
            source,
        })
    }

    /// Bundled scenarios by file name (`nlos_2ue.json`, `los_2ue.json`,
    /// `nlos_4ue.json`, `nlos_8ue_upa.json`).
    pub fn bundled(name: &str) -> Result<Self> {
        let text = match name.trim_end_matches(".json") {
            "nlos_2ue" => include_str!("../scenarios/nlos_2ue.json"),
            "los_2ue" => include_str!("../scenarios/los_2ue.json"),
            "nlos_4ue" => include_str!("../scenarios/nlos_4ue.json"),
            "nlos_8ue_upa" => include_str!("../scenarios/nlos_8ue_upa.json"),
            other => {
                return Err(CovshapeError::InvalidConfig(format!("no bundled scenario named {other}")));
            }
        };
        Self::from_json(text)
    }

    pub const BUNDLED: [&'static str; 4] = ["nlos_2ue.json", "los_2ue.json", "nlos_4ue.json", "nlos_8ue_upa.json"];

    /// Total BS antenna count `mx * my`.
    pub fn bs_antennas(&self) -> usize {
        self.bs.mx * self.bs.my
    }

    /// Resize the BS array to `m` antennas. ULAs change `mx`; UPAs keep the
    /// elevation row count and change `mx`.
    pub fn with_bs_antennas(mut self, m: usize) -> Result<Self> {
        if m == 0 || !m.is_multiple_of(self.bs.my) {
            return Err(CovshapeError::InvalidConfig(format!(
                "{m} BS antennas not divisible into {} elevation rows",
                self.bs.my
            )));
        }
        self.bs.mx = m / self.bs.my;
        Ok(self)
    }

    /// Smallest distance between two UEs in the same shaping group.
    pub fn inter_ue_distance(&self) -> Result<f64> {
        let mut best = f64::INFINITY;
        for group in self.groups() {
            for (i, &a) in group.iter().enumerate() {
                for &b in &group[i + 1..] {
                    let pa = point(&self.ues[a].position, "UE")?;
                    let pb = point(&self.ues[b].position, "UE")?;
                    best = best.min(norm(sub(pa, pb)));
                }
            }
        }
        Ok(best)
    }

    /// Scale UE positions about each shaping group's centroid so the smallest
    /// in-group UE spacing becomes `d`. Scatterers stay in place.
    pub fn with_inter_ue_distance(mut self, d: f64) -> Result<Self> {
        let current = self.inter_ue_distance()?;
        if !(current.is_finite() && current > 0.0 && d > 0.0) {
            return Err(CovshapeError::InvalidConfig(format!(
                "cannot rescale inter-UE distance {current} to {d}"
            )));
        }
        let factor = d / current;
        for group in self.groups() {
            let pts: Vec<Point> = group
                .iter()
                .map(|&u| point(&self.ues[u].position, "UE"))
                .collect::<Result<_>>()?;
            let mut centroid = [0.0; 3];
            for p in &pts {
                for i in 0..3 {
                    centroid[i] += p[i] / pts.len() as f64;
                }
            }
            for (&u, p) in group.iter().zip(&pts) {
                let dim = self.ues[u].position.len();
                let scaled: Vec<f64> = (0..dim).map(|i| centroid[i] + factor * (p[i] - centroid[i])).collect();
                self.ues[u].position = scaled;
            }
        }
        Ok(self)
    }

    fn groups(&self) -> Vec<Vec<usize>> {
        self.shaping_groups
            .clone()
            .unwrap_or_else(|| vec![(0..self.ues.len()).collect()])
    }

    /// Derive per-path angles and distances and build a validated [`Scenario`].
    pub fn to_scenario(&self) -> Result<Scenario> {
        let bs_array = ArrayGeometry {
            kind: self.bs.kind,
            n_azimuth: self.bs.mx,
            n_elevation: self.bs.my,
            spacing: self.bs.spacing,
        };
        bs_array.validate()?;
        let bs_pos = point(&self.bs.position, "BS")?;
        let bs_axis = axis(self.bs.axis.as_ref(), "BS")?;
        let scatterers: Vec<Point> = self
            .scatterers
            .iter()
            .map(|s| point(s, "scatterer"))
            .collect::<Result<_>>()?;

        let mut ue_arrays = Vec::with_capacity(self.ues.len());
        let mut paths = Vec::with_capacity(self.ues.len());
        for (k, ue) in self.ues.iter().enumerate() {
            let ue_pos = point(&ue.position, "UE")?;
            let ue_axis = axis(ue.axis.as_ref(), "UE")?;
            ue_arrays.push(ArrayGeometry::ula(ue.n_antennas, ue.spacing)?);
            let mut list = Vec::new();
            if self.kappa > 0.0 {
                let down = sub(ue_pos, bs_pos);
                list.push(PropagationPath {
                    distance: norm(down),
                    ue_angle: horizontal_angle(sub(bs_pos, ue_pos), ue_axis),
                    bs_azimuth: horizontal_angle(down, bs_axis),
                    bs_elevation: elevation(down),
                    is_los: true,
                });
            }
            let visible: Vec<usize> = match &ue.scatterers {
                Some(idx) => idx.clone(),
                None => (0..scatterers.len()).collect(),
            };
            for s_idx in visible {
                let s = *scatterers.get(s_idx).ok_or(CovshapeError::IndexOutOfRange {
                    what: "scatterer",
                    index: s_idx,
                    len: scatterers.len(),
                })?;
                let bs_leg = sub(s, bs_pos);
                let ue_leg = sub(s, ue_pos);
                list.push(PropagationPath {
                    distance: norm(bs_leg) + norm(ue_leg),
                    ue_angle: horizontal_angle(ue_leg, ue_axis),
                    bs_azimuth: horizontal_angle(bs_leg, bs_axis),
                    bs_elevation: elevation(bs_leg),
                    is_los: false,
                });
            }
            if list.is_empty() {
                return Err(CovshapeError::ScenarioInconsistency(format!(
                    "UE {k} sees no scatterers and kappa is 0"
                )));
            }
            paths.push(list);
        }
        let scenario = Scenario {
            bs_array,
            ue_arrays,
            paths,
            ricean_factor: self.kappa,
            pathloss_exponent: self.beta,
            powers: Powers {
                rho_bs: dbm_to_watts(self.powers.rho_bs_dbm),
                rho_ue: dbm_to_watts(self.powers.rho_ue_dbm),
            },
            noise: Noise {
                sigma2_bs: dbm_to_watts(self.noise.sigma2_bs_dbm),
                sigma2_ue: dbm_to_watts(self.noise.sigma2_ue_dbm),
            },
            shaping_groups: self.groups(),
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    const TINY: &str = r#"{
        "bs": {"kind": "ula", "mx": 8, "position": [0, 0]},
        "ues": [{"position": [40, 0], "n_antennas": 2},
                {"position": [40, 4], "n_antennas": 2}],
        "scatterers": [[30, 0]],
        "kappa": 0, "beta": 2
    }"#;

    #[test]
    fn single_bounce_distances_and_angles() {
        let f = ScenarioFile::from_json(TINY).unwrap();
        let s = f.to_scenario().unwrap();
        let p = &s.paths[0][0];
        assert!((p.distance - 40.0).abs() < 1e-12);
        // scatterer on +x, BS axis +y => broadside
        assert!((p.bs_azimuth - FRAC_PI_2).abs() < 1e-12);
        // UE looks back along -x, UE axis +y => broadside
        assert!((p.ue_angle - FRAC_PI_2).abs() < 1e-12);
        let q = &s.paths[1][0];
        assert!((q.distance - (30.0 + (100.0f64 + 16.0).sqrt())).abs() < 1e-12);
        assert_eq!(s.powers.rho_bs, 1.0);
    }

    #[test]
    fn los_path_added_with_kappa() {
        let mut f = ScenarioFile::from_json(TINY).unwrap();
        f.kappa = 2.5;
        let s = f.to_scenario().unwrap();
        assert_eq!(s.paths[0].len(), 2);
        assert!(s.paths[0][0].is_los);
        assert!((s.paths[1][0].distance - (1600.0f64 + 16.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rescale_inter_ue_distance() {
        let f = ScenarioFile::from_json(TINY).unwrap();
        assert!((f.inter_ue_distance().unwrap() - 4.0).abs() < 1e-12);
        let g = f.with_inter_ue_distance(10.0).unwrap();
        assert!((g.inter_ue_distance().unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(g.ues[0].position, vec![40.0, -3.0]);
    }

    #[test]
    fn resize_upa() {
        let mut f = ScenarioFile::from_json(TINY).unwrap();
        f.bs.kind = ArrayKind::Upa;
        f.bs.my = 8;
        let g = f.clone().with_bs_antennas(128).unwrap();
        assert_eq!((g.bs.mx, g.bs.my), (16, 8));
        assert!(f.with_bs_antennas(100).is_err());
    }

    #[test]
    fn bundled_scenarios_parse() {
        for name in ScenarioFile::BUNDLED {
            let f = ScenarioFile::bundled(name).unwrap();
            f.to_scenario().unwrap();
        }
    }

    #[test]
    fn unknown_scatterer_index_is_an_error() {
        let mut f = ScenarioFile::from_json(TINY).unwrap();
        f.ues[0].scatterers = Some(vec![3]);
        assert!(f.to_scenario().is_err());
    }
}
