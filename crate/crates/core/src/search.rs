//! Exhaustive search over binary port configurations.
//!
//! Configuration `i` closes port `k` iff bit `k` of `i` is set. The search
//! is parallel over configurations; the reduction compares
//! `(value, index)` pairs so the result does not depend on scheduling.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::impm::{evaluate_configuration, PartitionedZ, PortConfiguration, ReflectionCurve};

/// Largest port count the exhaustive search accepts.
pub const MAX_PORTS: usize = 24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("TooManyPorts: {m} ports give 2^{m} configurations; at most {MAX_PORTS} ports are searchable")]
    TooManyPorts { m: usize },
    #[error("port count {given} does not match the partitioned matrix ({actual})")]
    PortCountMismatch { given: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub best_config: PortConfiguration,
    pub best_value: f64,
    pub evaluated_count: u64,
    /// Configurations whose evaluation failed and were scored `+inf`.
    pub failed_count: u64,
    /// Objective of every configuration, indexed by configuration index.
    #[serde(skip)]
    pub value_table: Option<Vec<f64>>,
}

/// Total order used for the arg-min: NaN counts as `+inf`, ties go to the
/// smaller configuration index.
fn better(a: (f64, u64), b: (f64, u64)) -> (f64, u64) {
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    match key(a.0).total_cmp(&key(b.0)).then(a.1.cmp(&b.1)) {
        Ordering::Greater => b,
        _ => a,
    }
}

/// Scores all `2^m` configurations. Failing evaluations (singular blocks,
/// objective errors) score `+inf` instead of aborting.
pub fn exhaustive_search<F, E>(
    p: &PartitionedZ,
    objective: F,
    m: usize,
    z0: f64,
    keep_table: bool,
) -> Result<SearchResult, SearchError>
where
    F: Fn(&ReflectionCurve) -> Result<f64, E> + Sync,
{
    if m > MAX_PORTS {
        return Err(SearchError::TooManyPorts { m });
    }
    if m != p.m() {
        return Err(SearchError::PortCountMismatch {
            given: m,
            actual: p.m(),
        });
    }
    let total = 1u64 << m;
    let score = |i: u64| -> f64 {
        let y = PortConfiguration::from_index(i, m);
        evaluate_configuration(p, &y, z0)
            .ok()
            .and_then(|curve| objective(&curve).ok())
            .filter(|v| !v.is_nan())
            .unwrap_or(f64::INFINITY)
    };

    let (best, table, failed_count) = if keep_table {
        let table: Vec<f64> = (0..total).into_par_iter().map(score).collect();
        let best = table
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i as u64))
            .reduce(better)
            .expect("at least one configuration");
        let failed = table.iter().filter(|v| **v == f64::INFINITY).count() as u64;
        (best, Some(table), failed)
    } else {
        let (best, failed) = (0..total)
            .into_par_iter()
            .map(|i| {
                let v = score(i);
                ((v, i), u64::from(v == f64::INFINITY))
            })
            .reduce(|| ((f64::INFINITY, u64::MAX), 0), |a, b| (better(a.0, b.0), a.1 + b.1));
        (best, None, failed)
    };
    Ok(SearchResult {
        best_config: PortConfiguration::from_index(best.1, m),
        best_value: best.0,
        evaluated_count: total,
        failed_count,
        value_table: table,
    })
}

/// `config_index,bits,objective` rows for every configuration.
pub fn value_table_csv(table: &[f64], m: usize) -> String {
    let mut out = String::with_capacity(table.len() * (m + 32));
    out.push_str("config_index,bits,objective\n");
    for (i, v) in table.iter().enumerate() {
        let bits = PortConfiguration::from_index(i as u64, m).to_bitstring();
        let _ = writeln!(out, "{i},{bits},{v:.12e}");
    }
    out
}
