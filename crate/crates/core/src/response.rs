//! Response features and design objectives.
//!
//! Everything here works on a borrowed `(frequency, dB)` view so that the
//! same objectives score backend curves and surrogate predictions alike.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impm::ReflectionCurve;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("found {found} resonances, need {required}")]
    InsufficientResonances { found: usize, required: usize },
    #[error("{f} GHz is outside the sweep [{lo}, {hi}] GHz")]
    OutOfRange { f: f64, lo: f64, hi: f64 },
    #[error("band [{f_low}, {f_high}] GHz covers fewer than 2 sweep samples")]
    EmptyBand { f_low: f64, f_high: f64 },
    #[error("length mismatch: {got} values, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("response has {0} points, need at least 3")]
    TooFewPoints(usize),
    #[error("invalid objective: {0}")]
    InvalidSpec(String),
}

/// Borrowed reflection magnitude in dB over ascending frequencies (GHz).
#[derive(Debug, Clone, Copy)]
pub struct DbResponse<'a> {
    pub freq_ghz: &'a [f64],
    pub mag_db: &'a [f64],
}

impl<'a> DbResponse<'a> {
    /// Panics on length mismatch.
    pub fn new(freq_ghz: &'a [f64], mag_db: &'a [f64]) -> Self {
        assert_eq!(freq_ghz.len(), mag_db.len());
        Self { freq_ghz, mag_db }
    }

    pub fn len(&self) -> usize {
        self.freq_ghz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq_ghz.is_empty()
    }
}

impl<'a> From<&'a ReflectionCurve> for DbResponse<'a> {
    fn from(c: &'a ReflectionCurve) -> Self {
        DbResponse::new(c.freqs(), c.mag_db())
    }
}

/// Resonance frequencies (GHz, ascending) and their levels (dB).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub omega: Vec<f64>,
    pub levels: Vec<f64>,
}

impl FeatureVector {
    pub fn q(&self) -> usize {
        self.omega.len()
    }

    /// Flattened `[omega..., levels...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.omega.iter().chain(&self.levels).copied().collect()
    }

    /// Inverse of [`FeatureVector::to_vec`]; panics on odd length.
    pub fn from_flat(v: &[f64]) -> Self {
        assert!(v.len().is_multiple_of(2), "flattened features have even length");
        let q = v.len() / 2;
        Self {
            omega: v[..q].to_vec(),
            levels: v[q..].to_vec(),
        }
    }
}

/// Indices of samples strictly below both neighbours.
pub fn local_minima(resp: DbResponse<'_>) -> Vec<usize> {
    let y = resp.mag_db;
    (1..y.len().saturating_sub(1))
        .filter(|&i| y[i] < y[i - 1] && y[i] < y[i + 1])
        .collect()
}

/// Vertex of the parabola through the three samples around `i`, clamped to
/// the outer two abscissae.
fn parabolic_vertex(x: &[f64], y: &[f64], i: usize) -> (f64, f64) {
    let (x1, y1) = (x[i], y[i]);
    let h0 = x[i - 1] - x1;
    let h2 = x[i + 1] - x1;
    let d0 = (y[i - 1] - y1) / h0;
    let d2 = (y[i + 1] - y1) / h2;
    let a = (d2 - d0) / (h2 - h0);
    let b = d2 - a * h2;
    if !(a > 0.0) {
        return (x1, y1);
    }
    let offset = (-b / (2.0 * a)).clamp(h0, h2);
    (x1 + offset, y1 + a * offset * offset + b * offset)
}

/// The `q` deepest resonances, refined by 3-point parabolic interpolation
/// and returned in ascending frequency.
pub fn extract_features(resp: DbResponse<'_>, q: usize) -> Result<FeatureVector, AnalysisError> {
    if resp.len() < 3 {
        return Err(AnalysisError::TooFewPoints(resp.len()));
    }
    let mut minima = local_minima(resp);
    if minima.len() < q {
        return Err(AnalysisError::InsufficientResonances {
            found: minima.len(),
            required: q,
        });
    }
    minima.sort_by(|&a, &b| resp.mag_db[a].total_cmp(&resp.mag_db[b]).then(a.cmp(&b)));
    minima.truncate(q);
    minima.sort_unstable();
    let (omega, levels) = minima
        .iter()
        .map(|&i| parabolic_vertex(resp.freq_ghz, resp.mag_db, i))
        .unzip();
    Ok(FeatureVector { omega, levels })
}

/// Linear interpolation of the dB response at `f`.
pub fn level_at_frequency(resp: DbResponse<'_>, f: f64) -> Result<f64, AnalysisError> {
    let x = resp.freq_ghz;
    let (lo, hi) = (x[0], x[x.len() - 1]);
    if !(f >= lo && f <= hi) {
        return Err(AnalysisError::OutOfRange { f, lo, hi });
    }
    let i = x.partition_point(|&v| v <= f) - 1;
    if x[i] == f || i + 1 == x.len() {
        return Ok(resp.mag_db[i]);
    }
    let t = (f - x[i]) / (x[i + 1] - x[i]);
    Ok(resp.mag_db[i] + t * (resp.mag_db[i + 1] - resp.mag_db[i]))
}

/// Grid-tolerance used when deciding whether a sample lies in a band.
const BAND_EDGE_TOL: f64 = 1e-9;

/// Worst in-band excess over the threshold, clamped at zero.
pub fn objective_broadband(resp: DbResponse<'_>, f_low: f64, f_high: f64, thd: f64) -> Result<f64, AnalysisError> {
    let in_band: Vec<f64> = resp
        .freq_ghz
        .iter()
        .zip(resp.mag_db)
        .filter(|(f, _)| **f >= f_low - BAND_EDGE_TOL && **f <= f_high + BAND_EDGE_TOL)
        .map(|(_, db)| *db)
        .collect();
    if in_band.len() < 2 {
        return Err(AnalysisError::EmptyBand { f_low, f_high });
    }
    Ok(in_band.iter().map(|db| (db - thd).max(0.0)).fold(0.0, f64::max))
}

/// First resonance at or below `thd` (falling back to the deepest one),
/// scored together with the response at `k` times its frequency.
pub fn objective_dualband(resp: DbResponse<'_>, k: f64, thd: f64) -> Result<f64, AnalysisError> {
    if resp.len() < 3 {
        return Err(AnalysisError::TooFewPoints(resp.len()));
    }
    let minima = local_minima(resp);
    let first = minima
        .iter()
        .copied()
        .find(|&i| resp.mag_db[i] <= thd)
        .or_else(|| {
            minima
                .iter()
                .copied()
                .min_by(|&a, &b| resp.mag_db[a].total_cmp(&resp.mag_db[b]).then(a.cmp(&b)))
        })
        .ok_or(AnalysisError::InsufficientResonances { found: 0, required: 1 })?;
    let f_r1 = resp.freq_ghz[first];
    let l1 = level_at_frequency(resp, f_r1)?;
    let l2 = level_at_frequency(resp, k * f_r1)?;
    Ok((l1 - thd).max(l2 - thd))
}

/// `beta1 * max(levels - thd) + |omega - targets|`, without clamping.
pub fn objective_feature(
    features: &FeatureVector,
    targets: &[f64],
    thd: f64,
    beta1: f64,
) -> Result<f64, AnalysisError> {
    if features.omega.len() != targets.len() || features.levels.len() != targets.len() {
        return Err(AnalysisError::LengthMismatch {
            expected: targets.len(),
            got: features.omega.len(),
        });
    }
    let level_term = features
        .levels
        .iter()
        .map(|l| l - thd)
        .fold(f64::NEG_INFINITY, f64::max);
    let distance = features
        .omega
        .iter()
        .zip(targets)
        .map(|(w, t)| (w - t).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(beta1 * level_term + distance)
}

/// Objective selection shared by both optimisation stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    Broadband {
        f_low_ghz: f64,
        f_high_ghz: f64,
        thd_db: f64,
    },
    #[serde(rename = "dualband")]
    DualBand { k: f64, thd_db: f64 },
    Feature {
        targets_ghz: Vec<f64>,
        thd_db: f64,
        beta1: f64,
    },
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: &str| Err(AnalysisError::InvalidSpec(m.to_string()));
        match self {
            Self::Broadband {
                f_low_ghz,
                f_high_ghz,
                thd_db,
            } => {
                if !(f_low_ghz < f_high_ghz) || !thd_db.is_finite() {
                    return bad("broadband objective needs f_low_ghz < f_high_ghz");
                }
            }
            Self::DualBand { k, thd_db } => {
                if !(*k > 1.0) || !thd_db.is_finite() {
                    return bad("dual-band objective needs k > 1");
                }
            }
            Self::Feature {
                targets_ghz,
                thd_db,
                beta1,
            } => {
                if !(*beta1 > 0.0) || !thd_db.is_finite() {
                    return bad("feature objective needs beta1 > 0");
                }
                if targets_ghz.is_empty() || targets_ghz.windows(2).any(|w| w[1] <= w[0]) {
                    return bad("feature targets must be non-empty and ascending");
                }
            }
        }
        Ok(())
    }

    /// Number of features a feature objective consumes.
    pub fn feature_count(&self) -> Option<usize> {
        match self {
            Self::Feature { targets_ghz, .. } => Some(targets_ghz.len()),
            _ => None,
        }
    }

    /// Scores a dB response; feature objectives extract their features first.
    pub fn evaluate(&self, resp: DbResponse<'_>) -> Result<f64, AnalysisError> {
        match self {
            Self::Broadband {
                f_low_ghz,
                f_high_ghz,
                thd_db,
            } => objective_broadband(resp, *f_low_ghz, *f_high_ghz, *thd_db),
            Self::DualBand { k, thd_db } => objective_dualband(resp, *k, *thd_db),
            Self::Feature { targets_ghz, .. } => {
                let fv = extract_features(resp, targets_ghz.len())?;
                self.evaluate_features(&fv)
            }
        }
    }

    /// Scores a feature vector. Only meaningful for feature objectives.
    pub fn evaluate_features(&self, fv: &FeatureVector) -> Result<f64, AnalysisError> {
        match self {
            Self::Feature {
                targets_ghz,
                thd_db,
                beta1,
            } => objective_feature(fv, targets_ghz, *thd_db, *beta1),
            _ => Err(AnalysisError::InvalidSpec(
                "only feature objectives score feature vectors".into(),
            )),
        }
    }
}

/// Contiguous frequency ranges where the response is at or below `thd`,
/// with edges placed by linear interpolation of the crossings.
pub fn bands_below(resp: DbResponse<'_>, thd: f64) -> Vec<(f64, f64)> {
    let (x, y) = (resp.freq_ghz, resp.mag_db);
    let crossing = |i: usize| {
        let t = (thd - y[i]) / (y[i + 1] - y[i]);
        x[i] + t * (x[i + 1] - x[i])
    };
    let mut bands = Vec::new();
    let mut start: Option<f64> = None;
    for (i, &yi) in y.iter().enumerate() {
        let inside = yi <= thd;
        match (inside, start) {
            (true, None) => start = Some(if i == 0 { x[0] } else { crossing(i - 1) }),
            (false, Some(s)) => {
                bands.push((s, crossing(i - 1)));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        bands.push((s, x[x.len() - 1]));
    }
    bands
}
