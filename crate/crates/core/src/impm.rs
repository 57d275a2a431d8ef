//! Internal multi-port method.
//!
//! One open-circuit impedance matrix `Z` (feed port first, then every
//! internal port) is split into blocks
//!
//! ```text
//!     | Z_A  Z_B |
//! Z = |          |
//!     | Z_C  Z_D |
//! ```
//!
//! and the feed input impedance of any open/closed pattern of internal
//! ports follows from a Schur complement: open ports carry no current and
//! drop out, closed ports have zero voltage, so with `S` the closed set
//!
//! ```text
//! Z_in = Z_A - Z_B[S] Z_D[S,S]^-1 Z_C[S]
//! ```
//!
//! Closed ports that form a loop in the pixel lattice make `Z_D[S,S]`
//! rank deficient (their voltages sum to zero around the loop). Such ports
//! are redundant shorts; the reduction drops them through a rank-revealing
//! solve instead of failing.

use std::fmt;

use nalgebra::{DMatrix, DVector, RowDVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{FrequencySweep, MultiportZ};
use crate::linalg::solve_rank_revealing;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImpmError {
    #[error("configuration has {got} ports, expected {expected}")]
    ConfigurationLength { expected: usize, got: usize },
    #[error("closed-port block is singular at {freq_ghz} GHz (residual {residual:e})")]
    SingularBlock { freq_ghz: f64, residual: f64 },
    #[error("degenerate load: |z_in + z0| = {magnitude:e}")]
    DegenerateLoad { magnitude: f64 },
    #[error("invalid port bitstring '{0}': expected only '0' (open) and '1' (closed)")]
    InvalidBitstring(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortState {
    /// Pixels disconnected (infinite load).
    Open,
    /// Pixels connected (zero load).
    Closed,
}

impl PortState {
    pub fn is_closed(self) -> bool {
        self == PortState::Closed
    }
}

/// Open/closed state of every internal port, in [`PortMap`] order.
///
/// [`PortMap`]: crate::geometry::PortMap
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PortConfiguration {
    states: Vec<PortState>,
}

impl PortConfiguration {
    pub fn new(states: Vec<PortState>) -> Self {
        Self { states }
    }

    pub fn all_open(m: usize) -> Self {
        Self::new(vec![PortState::Open; m])
    }

    pub fn all_closed(m: usize) -> Self {
        Self::new(vec![PortState::Closed; m])
    }

    /// Bit `k` of `index` set means port `k` is closed.
    pub fn from_index(index: u64, m: usize) -> Self {
        Self::new(
            (0..m)
                .map(|k| {
                    if index >> k & 1 == 1 {
                        PortState::Closed
                    } else {
                        PortState::Open
                    }
                })
                .collect(),
        )
    }

    pub fn index(&self) -> u64 {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_closed())
            .fold(0, |acc, (k, _)| acc | 1 << k)
    }

    /// Parses `"0110..."`, first character = first port.
    pub fn from_bitstring(bits: &str) -> Result<Self, ImpmError> {
        bits.trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(PortState::Open),
                '1' => Ok(PortState::Closed),
                _ => Err(ImpmError::InvalidBitstring(bits.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self::new)
    }

    pub fn to_bitstring(&self) -> String {
        self.states
            .iter()
            .map(|s| if s.is_closed() { '1' } else { '0' })
            .collect()
    }

    pub fn states(&self) -> &[PortState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn closed_indices(&self) -> Vec<usize> {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_closed())
            .map(|(k, _)| k)
            .collect()
    }
}

impl fmt::Display for PortConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bitstring())
    }
}

/// The four blocks of the impedance matrix at one frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionBlocks {
    pub z_a: Complex64,
    pub z_b: RowDVector<Complex64>,
    pub z_c: DVector<Complex64>,
    pub z_d: DMatrix<Complex64>,
}

impl PartitionBlocks {
    pub fn reassemble(&self) -> DMatrix<Complex64> {
        let m = self.z_d.nrows();
        let mut z = DMatrix::zeros(m + 1, m + 1);
        z[(0, 0)] = self.z_a;
        z.view_mut((0, 1), (1, m)).copy_from(&self.z_b);
        z.view_mut((1, 0), (m, 1)).copy_from(&self.z_c);
        z.view_mut((1, 1), (m, m)).copy_from(&self.z_d);
        z
    }

    /// Input impedance with the ports in `closed` shorted and all others open.
    fn input_impedance(&self, closed: &[usize]) -> Result<Complex64, f64> {
        if closed.is_empty() {
            return Ok(self.z_a);
        }
        let k = closed.len();
        let block = DMatrix::from_fn(k, k, |i, j| self.z_d[(closed[i], closed[j])]);
        let rhs = DVector::from_fn(k, |i, _| self.z_c[closed[i]]);
        let (sol, _rank) = solve_rank_revealing(&block, &rhs).map_err(|e| e.residual)?;
        let correction: Complex64 = closed.iter().zip(sol.iter()).map(|(&p, s)| self.z_b[p] * s).sum();
        Ok(self.z_a - correction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedZ {
    sweep: FrequencySweep,
    m: usize,
    blocks: Vec<PartitionBlocks>,
}

impl PartitionedZ {
    pub fn sweep(&self) -> &FrequencySweep {
        &self.sweep
    }

    /// Number of internal ports.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn blocks(&self) -> &[PartitionBlocks] {
        &self.blocks
    }
}

pub fn partition(z: &MultiportZ) -> PartitionedZ {
    let m = z.n_ports() - 1;
    let blocks = z
        .matrices()
        .iter()
        .map(|mat| PartitionBlocks {
            z_a: mat[(0, 0)],
            z_b: mat.row(0).columns(1, m).into_owned(),
            z_c: mat.column(0).rows(1, m).into_owned(),
            z_d: mat.view((1, 1), (m, m)).into_owned(),
        })
        .collect();
    PartitionedZ {
        sweep: z.sweep().clone(),
        m,
        blocks,
    }
}

fn check_len(p: &PartitionedZ, y: &PortConfiguration) -> Result<(), ImpmError> {
    if y.len() != p.m {
        return Err(ImpmError::ConfigurationLength {
            expected: p.m,
            got: y.len(),
        });
    }
    Ok(())
}

/// Feed input impedance (ohms) at every frequency for configuration `y`.
pub fn reduce_input_impedance(p: &PartitionedZ, y: &PortConfiguration) -> Result<Vec<Complex64>, ImpmError> {
    check_len(p, y)?;
    let closed = y.closed_indices();
    p.blocks
        .iter()
        .zip(p.sweep.points())
        .map(|(b, &f)| {
            b.input_impedance(&closed)
                .map_err(|residual| ImpmError::SingularBlock { freq_ghz: f, residual })
        })
        .collect()
}

/// Reflection coefficient of a single-port load against reference `z0`.
pub fn reflection(z_in: Complex64, z0: f64) -> Result<Complex64, ImpmError> {
    let den = z_in + z0;
    if den.norm() < 1e-12 {
        return Err(ImpmError::DegenerateLoad { magnitude: den.norm() });
    }
    Ok((z_in - z0) / den)
}

/// Floor applied to `|gamma|` in dB.
pub const DB_FLOOR: f64 = -100.0;

pub fn magnitude_db(gamma: Complex64) -> f64 {
    let mag = gamma.norm();
    if mag < 1e-5 {
        DB_FLOOR
    } else {
        20.0 * mag.log10()
    }
}

/// Reflection at the feed port over a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReflectionCurve {
    sweep: FrequencySweep,
    gamma: Vec<Complex64>,
    mag_db: Vec<f64>,
}

impl ReflectionCurve {
    /// Panics if `gamma` and `sweep` differ in length.
    pub fn new(sweep: FrequencySweep, gamma: Vec<Complex64>) -> Self {
        assert_eq!(sweep.len(), gamma.len(), "one reflection value per frequency");
        let mag_db = gamma.iter().map(|g| magnitude_db(*g)).collect();
        Self { sweep, gamma, mag_db }
    }

    pub fn sweep(&self) -> &FrequencySweep {
        &self.sweep
    }

    pub fn freqs(&self) -> &[f64] {
        self.sweep.points()
    }

    pub fn gamma(&self) -> &[Complex64] {
        &self.gamma
    }

    pub fn mag_db(&self) -> &[f64] {
        &self.mag_db
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// Reflection response of configuration `y`. Works purely on the
/// partitioned matrix; no backend is involved.
pub fn evaluate_configuration(p: &PartitionedZ, y: &PortConfiguration, z0: f64) -> Result<ReflectionCurve, ImpmError> {
    let gamma = reduce_input_impedance(p, y)?
        .into_iter()
        .map(|z| reflection(z, z0))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReflectionCurve::new(p.sweep.clone(), gamma))
}
