//! Sources of multiport impedance data.
//!
//! The synthetic backend stands in for a full-wave solver: each pixel is a
//! series RLC branch to ground, each gap a small capacitor, and the feed a
//! series RL branch with a shunt capacitor. Externally computed matrices
//! can be loaded from Touchstone or JSON files instead.

mod circuit;
mod files;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;

pub use circuit::{build_circuit, extract_multiport, oracle_input_impedance, oracle_input_reflection, CircuitModel};
pub use files::{load_multiport_file, read_json, read_touchstone, write_json, write_touchstone, FileFormat};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("nodal admittance matrix is singular at {freq_ghz} GHz")]
    SingularSystem { freq_ghz: f64 },
    #[error("port map does not match the circuit: {0}")]
    PortMismatch(String),
    #[error("invalid frequency sweep: {0}")]
    InvalidSweep(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("unknown frequency unit '{0}'")]
    Unit(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Ascending list of frequencies in GHz. Usually uniform, but file data may
/// carry arbitrary spacing, so consumers only rely on ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FrequencySweep {
    freqs: Vec<f64>,
}

impl FrequencySweep {
    pub const DEFAULT_START_GHZ: f64 = 1.0;
    pub const DEFAULT_STOP_GHZ: f64 = 11.0;
    pub const DEFAULT_POINTS: usize = 201;

    pub fn uniform(f_start: f64, f_stop: f64, n_points: usize) -> Result<Self, BackendError> {
        if !(f_start > 0.0 && f_stop > f_start && f_stop.is_finite()) {
            return Err(BackendError::InvalidSweep(format!(
                "need 0 < f_start < f_stop (got {f_start}..{f_stop})"
            )));
        }
        if n_points < 2 {
            return Err(BackendError::InvalidSweep(format!(
                "need at least 2 points (got {n_points})"
            )));
        }
        let span = f_stop - f_start;
        let last = (n_points - 1) as f64;
        let freqs = (0..n_points).map(|k| f_start + span * k as f64 / last).collect();
        Ok(Self { freqs })
    }

    pub fn from_points(freqs: Vec<f64>) -> Result<Self, BackendError> {
        if freqs.is_empty() {
            return Err(BackendError::InvalidSweep("no frequency points".into()));
        }
        if freqs.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(BackendError::InvalidSweep("frequencies must be positive".into()));
        }
        if freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(BackendError::InvalidSweep(
                "frequencies must be strictly ascending".into(),
            ));
        }
        Ok(Self { freqs })
    }

    pub fn points(&self) -> &[f64] {
        &self.freqs
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.freqs[0]
    }

    pub fn stop(&self) -> f64 {
        self.freqs[self.freqs.len() - 1]
    }
}

impl Default for FrequencySweep {
    fn default() -> Self {
        Self::uniform(Self::DEFAULT_START_GHZ, Self::DEFAULT_STOP_GHZ, Self::DEFAULT_POINTS)
            .expect("default sweep is valid")
    }
}

impl TryFrom<Vec<f64>> for FrequencySweep {
    type Error = BackendError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::from_points(v)
    }
}

impl From<FrequencySweep> for Vec<f64> {
    fn from(s: FrequencySweep) -> Self {
        s.freqs
    }
}

/// Frequency-indexed N x N impedance matrices (ohms). Port 1 (index 0) is
/// the external feed; ports 2..N are the internal ports of a [`PortMap`].
///
/// [`PortMap`]: crate::geometry::PortMap
#[derive(Debug, Clone, PartialEq)]
pub struct MultiportZ {
    sweep: FrequencySweep,
    n_ports: usize,
    z0: f64,
    matrices: Vec<DMatrix<Complex64>>,
}

impl MultiportZ {
    pub fn new(sweep: FrequencySweep, z0: f64, matrices: Vec<DMatrix<Complex64>>) -> Result<Self, BackendError> {
        if matrices.len() != sweep.len() {
            return Err(BackendError::PortMismatch(format!(
                "{} matrices for {} frequencies",
                matrices.len(),
                sweep.len()
            )));
        }
        let n_ports = matrices.first().map_or(0, |m| m.nrows());
        if n_ports == 0 {
            return Err(BackendError::PortMismatch("empty impedance matrix".into()));
        }
        if matrices.iter().any(|m| m.nrows() != n_ports || m.ncols() != n_ports) {
            return Err(BackendError::PortMismatch(
                "matrices are not all square with the same size".into(),
            ));
        }
        Ok(Self {
            sweep,
            n_ports,
            z0,
            matrices,
        })
    }

    pub fn sweep(&self) -> &FrequencySweep {
        &self.sweep
    }

    /// N = M + 1.
    pub fn n_ports(&self) -> usize {
        self.n_ports
    }

    /// Reference impedance recorded alongside the data (used by file formats).
    pub fn z0(&self) -> f64 {
        self.z0
    }

    pub fn matrices(&self) -> &[DMatrix<Complex64>] {
        &self.matrices
    }

    /// Largest `|z_ij - z_ji| / max|z|` over all frequencies.
    pub fn reciprocity_error(&self) -> f64 {
        self.matrices
            .iter()
            .map(|m| {
                let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
                (m - m.transpose()).iter().map(|z| z.norm()).fold(0.0, f64::max) / scale
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sweep_layout() {
        let s = FrequencySweep::default();
        assert_eq!(s.len(), 201);
        assert_eq!(s.start(), 1.0);
        assert_eq!(s.stop(), 11.0);
        assert!((s.points()[1] - 1.05).abs() < 1e-12);
    }

    #[test]
    fn sweep_validation() {
        assert!(FrequencySweep::uniform(0.0, 1.0, 10).is_err());
        assert!(FrequencySweep::uniform(2.0, 1.0, 10).is_err());
        assert!(FrequencySweep::uniform(1.0, 2.0, 1).is_err());
        assert!(FrequencySweep::from_points(vec![1.0, 1.0]).is_err());
        assert!(FrequencySweep::from_points(vec![1.0, 1.5, 4.0]).is_ok());
    }

    #[test]
    fn multiport_rejects_ragged_matrices() {
        let sweep = FrequencySweep::from_points(vec![1.0, 2.0]).unwrap();
        let a = DMatrix::from_element(2, 2, Complex64::new(1.0, 0.0));
        let b = DMatrix::from_element(3, 3, Complex64::new(1.0, 0.0));
        assert!(MultiportZ::new(sweep.clone(), 50.0, vec![a.clone(), b]).is_err());
        assert!(MultiportZ::new(sweep, 50.0, vec![a]).is_err());
    }
}
