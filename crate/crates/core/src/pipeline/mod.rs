//! The two-stage synthesis procedure: one multiport extraction and an
//! exhaustive topology search, then trust-region tuning of the geometry
//! with the chosen topology frozen.

mod config;

use std::cell::Cell;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    BackendConfig, BackendKind, DesignConfig, FileFormatConfig, GridConfig, PipelineConfig, Stage1Config, Stage2Config,
    SubstrateConfig, SweepConfig,
};

use crate::backend::{
    build_circuit, extract_multiport, load_multiport_file, oracle_input_reflection, BackendError, CircuitModel,
    MultiportZ,
};
use crate::geometry::{enumerate_ports, GeometryParams, PortMap};
use crate::impm::{evaluate_configuration, partition, ImpmError, PartitionedZ, PortConfiguration, ReflectionCurve};
use crate::response::{bands_below, extract_features, local_minima, AnalysisError, DbResponse, FeatureVector};
use crate::search::{exhaustive_search, SearchError, SearchResult, MAX_PORTS};
use crate::trust_region::{tr_optimize, tr_optimize_features, OptimizationTrace, TrustRegionError};

/// Threshold used for the band edges in the report.
pub const REPORT_THRESHOLD_DB: f64 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Extraction,
    Search,
    Tuning,
    Report,
    Verification,
    Curve,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Extraction => "stage 1 (multiport extraction)",
            Stage::Search => "stage 1 (topology search)",
            Stage::Tuning => "stage 2 (trust-region tuning)",
            Stage::Report => "report",
            Stage::Verification => "oracle verification",
            Stage::Curve => "curve evaluation",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error("{stage}: {source}")]
    Impm {
        stage: Stage,
        #[source]
        source: ImpmError,
    },
    #[error("{stage}: {source}")]
    Analysis {
        stage: Stage,
        #[source]
        source: AnalysisError,
    },
    #[error("stage 1 (topology search): {0}")]
    Search(#[from] SearchError),
    #[error("stage 2 (trust-region tuning): {0}")]
    TrustRegion(#[from] TrustRegionError),
    #[error("stage 1 (topology search): NoFeasibleTopology: none of the {evaluated} port configurations has a finite objective")]
    NoFeasibleTopology { evaluated: u64 },
}

impl PipelineError {
    /// True for problems with the user's input (exit code 2); everything
    /// else is a numerical failure (exit code 3).
    pub fn is_config_error(&self) -> bool {
        match self {
            Self::Config(_) | Self::Search(_) => true,
            Self::Backend { source, .. } => !matches!(source, BackendError::SingularSystem { .. }),
            Self::Impm { source, .. } => matches!(
                source,
                ImpmError::ConfigurationLength { .. } | ImpmError::InvalidBitstring(_)
            ),
            Self::Analysis { source, .. } => matches!(source, AnalysisError::InvalidSpec(_)),
            Self::TrustRegion(e) => matches!(
                e,
                TrustRegionError::InvalidConfig(_)
                    | TrustRegionError::InvalidBounds(_)
                    | TrustRegionError::OutOfBounds { .. }
            ),
            Self::NoFeasibleTopology { .. } => false,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_config_error() {
            2
        } else {
            3
        }
    }
}

fn backend_err(stage: Stage) -> impl Fn(BackendError) -> PipelineError {
    move |source| PipelineError::Backend { stage, source }
}

/// Simulation cost in single-response-evaluation equivalents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "LedgerRecord", from = "LedgerRecord")]
pub struct CostLedger {
    pub multiport_extractions: u64,
    pub single_response_evaluations: u64,
    pub weight: f64,
}

#[derive(Serialize, Deserialize)]
struct LedgerRecord {
    multiport_extractions: u64,
    single_response_evaluations: u64,
    weight: f64,
    total: f64,
}

impl From<CostLedger> for LedgerRecord {
    fn from(l: CostLedger) -> Self {
        Self {
            multiport_extractions: l.multiport_extractions,
            single_response_evaluations: l.single_response_evaluations,
            weight: l.weight,
            total: l.total(),
        }
    }
}

impl From<LedgerRecord> for CostLedger {
    fn from(r: LedgerRecord) -> Self {
        Self {
            multiport_extractions: r.multiport_extractions,
            single_response_evaluations: r.single_response_evaluations,
            weight: r.weight,
        }
    }
}

impl CostLedger {
    pub fn new(weight: f64) -> Self {
        Self {
            multiport_extractions: 0,
            single_response_evaluations: 0,
            weight,
        }
    }

    pub fn total(&self) -> f64 {
        self.single_response_evaluations as f64 + self.weight * self.multiport_extractions as f64
    }
}

/// Where the multiport matrix and the stage-2 responses come from.
enum Backend {
    Synthetic { ports: PortMap },
    File(MultiportZ),
}

fn open_backend(cfg: &PipelineConfig) -> Result<Backend, PipelineError> {
    let shape = cfg.shape()?;
    match cfg.backend.kind {
        BackendKind::Synthetic => Ok(Backend::Synthetic {
            ports: enumerate_ports(shape),
        }),
        BackendKind::File => {
            let (path, format) = cfg.backend_file()?;
            let n = cfg.port_count()? + 1;
            let z = load_multiport_file(&path, format, Some(n)).map_err(backend_err(Stage::Extraction))?;
            if z.n_ports() != n {
                return Err(PipelineError::Config(format!(
                    "'{}' has {} ports but a {}x{} grid needs {n}",
                    path.display(),
                    z.n_ports(),
                    cfg.grid.rows,
                    cfg.grid.cols
                )));
            }
            Ok(Backend::File(z))
        }
    }
}

fn circuit_at(cfg: &PipelineConfig, x: &GeometryParams, stage: Stage) -> Result<CircuitModel, PipelineError> {
    build_circuit(x, cfg.shape()?, cfg.substrate.h_mm).map_err(backend_err(stage))
}

/// Extracts (or loads) the multiport matrix at `x0` and partitions it.
pub fn extract_partitioned(cfg: &PipelineConfig) -> Result<PartitionedZ, PipelineError> {
    let z = match open_backend(cfg)? {
        Backend::File(z) => z,
        Backend::Synthetic { ports } => {
            let circuit = circuit_at(cfg, &cfg.x0(), Stage::Extraction)?;
            extract_multiport(&circuit, &ports, &cfg.sweep()?).map_err(backend_err(Stage::Extraction))?
        }
    };
    Ok(partition(&z))
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub partitioned: PartitionedZ,
    pub search: SearchResult,
    /// Port-reduction prediction for the selected topology at `x0`.
    pub predicted_curve: ReflectionCurve,
    pub ledger: CostLedger,
}

/// Steps 1 to 3: port map, one multiport extraction, exhaustive search.
pub fn run_stage1(cfg: &PipelineConfig, keep_table: bool) -> Result<Stage1Outcome, PipelineError> {
    let m = cfg.port_count()?;
    if m > MAX_PORTS {
        return Err(SearchError::TooManyPorts { m }.into());
    }
    let partitioned = extract_partitioned(cfg)?;
    let mut ledger = CostLedger::new(cfg.extraction_cost_weight);
    ledger.multiport_extractions += 1;

    let objective = &cfg.stage1.objective;
    let min_resonances = cfg.stage1.min_resonances;
    let search = exhaustive_search(
        &partitioned,
        |curve: &ReflectionCurve| {
            let resp: DbResponse<'_> = curve.into();
            let found = local_minima(resp).len();
            if found < min_resonances {
                return Err(AnalysisError::InsufficientResonances {
                    found,
                    required: min_resonances,
                });
            }
            objective.evaluate(resp)
        },
        m,
        cfg.z0,
        keep_table,
    )?;
    if !search.best_value.is_finite() {
        return Err(PipelineError::NoFeasibleTopology {
            evaluated: search.evaluated_count,
        });
    }
    let predicted_curve =
        evaluate_configuration(&partitioned, &search.best_config, cfg.z0).map_err(|source| PipelineError::Impm {
            stage: Stage::Search,
            source,
        })?;
    Ok(Stage1Outcome {
        partitioned,
        search,
        predicted_curve,
        ledger,
    })
}

/// Backend response of design `x` with topology `y`, by direct solve.
pub fn evaluate_design(
    cfg: &PipelineConfig,
    y: &PortConfiguration,
    x: &GeometryParams,
) -> Result<ReflectionCurve, PipelineError> {
    let ports = enumerate_ports(cfg.shape()?);
    if y.len() != ports.len() {
        return Err(PipelineError::Impm {
            stage: Stage::Curve,
            source: ImpmError::ConfigurationLength {
                expected: ports.len(),
                got: y.len(),
            },
        });
    }
    let circuit = circuit_at(cfg, x, Stage::Curve)?;
    oracle_input_reflection(&circuit, &ports, y, &cfg.sweep()?, cfg.z0).map_err(backend_err(Stage::Curve))
}

/// Reflection curve for `(x, y)`. The synthetic backend solves the circuit
/// at `x` directly; the file backend reduces the stored matrix, so `x` must
/// be left unset there.
pub fn curve_for(
    cfg: &PipelineConfig,
    y: &PortConfiguration,
    x: Option<&GeometryParams>,
) -> Result<ReflectionCurve, PipelineError> {
    match cfg.backend.kind {
        BackendKind::Synthetic => {
            if let Some(x) = x {
                cfg.bounds()?
                    .check(&x.to_array())
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
            }
            evaluate_design(cfg, y, x.unwrap_or(&cfg.x0()))
        }
        BackendKind::File => {
            if x.is_some() {
                return Err(PipelineError::Config(
                    "the file backend holds a single geometry; omit the design vector".into(),
                ));
            }
            let p = extract_partitioned(cfg)?;
            evaluate_configuration(&p, y, cfg.z0).map_err(|source| PipelineError::Impm {
                stage: Stage::Curve,
                source,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub x_star: GeometryParams,
    pub trace: OptimizationTrace,
    pub initial_curve: ReflectionCurve,
    pub final_curve: ReflectionCurve,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub final_features: Option<FeatureVector>,
    pub single_response_evaluations: u64,
}

/// Steps 4 to 6: trust-region tuning of the geometry with `y` frozen. Every
/// response is a direct circuit solve; no multiport matrix is extracted.
pub fn run_stage2(cfg: &PipelineConfig, y: &PortConfiguration) -> Result<Stage2Outcome, PipelineError> {
    if cfg.backend.kind != BackendKind::Synthetic {
        return Err(PipelineError::Config(
            "stage 2 needs the synthetic backend: a stored matrix cannot be re-evaluated at new geometries".into(),
        ));
    }
    let bounds = cfg.bounds()?;
    let objective = &cfg.stage2.objective;
    let calls = Cell::new(0u64);
    let evaluate = |x: &[f64]| {
        calls.set(calls.get() + 1);
        evaluate_design(cfg, y, &GeometryParams::from_slice(x))
    };

    let (x_star, trace) = if cfg.stage2.feature_mode {
        let q = objective.feature_count().expect("validated feature objective");
        tr_optimize_features(
            evaluate,
            |curve: &ReflectionCurve| extract_features(curve.into(), q).map(|f| f.to_vec()),
            |f: &[f64]| objective.evaluate_features(&FeatureVector::from_flat(f)),
            &cfg.design.x0,
            &bounds,
            &cfg.trust_region,
        )?
    } else {
        let freqs = cfg.sweep()?.points().to_vec();
        tr_optimize(
            |x: &[f64]| evaluate(x).map(|c| c.mag_db().to_vec()),
            |r: &[f64]| objective.evaluate(DbResponse::new(&freqs, r)),
            &cfg.design.x0,
            &bounds,
            &cfg.trust_region,
        )?
    };
    let single_response_evaluations = calls.get();
    debug_assert_eq!(single_response_evaluations as usize, trace.evaluations);

    // Report curves are fresh backend solves, kept out of the ledger.
    let x_star = GeometryParams::from_slice(&x_star);
    let analysis = |source| PipelineError::Analysis {
        stage: Stage::Report,
        source,
    };
    let initial_curve = evaluate_design(cfg, y, &cfg.x0())?;
    let final_curve = evaluate_design(cfg, y, &x_star)?;
    let initial_objective = objective.evaluate((&initial_curve).into()).map_err(analysis)?;
    let final_objective = objective.evaluate((&final_curve).into()).map_err(analysis)?;
    let final_features = match objective.feature_count() {
        Some(q) => Some(extract_features((&final_curve).into(), q).map_err(analysis)?),
        None => None,
    };
    Ok(Stage2Outcome {
        x_star,
        trace,
        initial_curve,
        final_curve,
        initial_objective,
        final_objective,
        final_features,
        single_response_evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage1Summary {
    pub y_star: String,
    pub config_index: u64,
    pub objective: f64,
    pub evaluated_count: u64,
    pub failed_count: u64,
}

impl From<&SearchResult> for Stage1Summary {
    fn from(r: &SearchResult) -> Self {
        Self {
            y_star: r.best_config.to_bitstring(),
            config_index: r.best_config.index(),
            objective: r.best_value,
            evaluated_count: r.evaluated_count,
            failed_count: r.failed_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportCurves {
    /// Port-reduction prediction at `x0`; absent when stage 1 was skipped.
    pub predicted_x0: Option<ReflectionCurve>,
    pub initial: ReflectionCurve,
    #[serde(rename = "final")]
    pub final_: ReflectionCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignReport {
    pub version: String,
    pub config: PipelineConfig,
    pub port_count: usize,
    pub y_star: String,
    pub x_star: GeometryParams,
    pub stage1: Option<Stage1Summary>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub trace: OptimizationTrace,
    pub curves: ReportCurves,
    pub ledger: CostLedger,
    /// Frequency ranges of the final curve at or below -10 dB.
    pub bands_below_10db: Vec<(f64, f64)>,
    /// Every resonance of the final curve, refined.
    pub resonances: FeatureVector,
    pub final_features: Option<FeatureVector>,
}

impl DesignReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialisation cannot fail")
    }
}

fn resonances(curve: &ReflectionCurve) -> FeatureVector {
    let resp: DbResponse<'_> = curve.into();
    let n = local_minima(resp).len();
    extract_features(resp, n).unwrap_or(FeatureVector {
        omega: Vec::new(),
        levels: Vec::new(),
    })
}

fn assemble_report(
    cfg: &PipelineConfig,
    y: &PortConfiguration,
    stage1: Option<&Stage1Outcome>,
    stage2: Stage2Outcome,
) -> DesignReport {
    let mut ledger = stage1.map_or(CostLedger::new(cfg.extraction_cost_weight), |s| s.ledger);
    ledger.single_response_evaluations += stage2.single_response_evaluations;
    DesignReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        port_count: y.len(),
        y_star: y.to_bitstring(),
        x_star: stage2.x_star,
        stage1: stage1.map(|s| (&s.search).into()),
        initial_objective: stage2.initial_objective,
        final_objective: stage2.final_objective,
        bands_below_10db: bands_below((&stage2.final_curve).into(), REPORT_THRESHOLD_DB),
        resonances: resonances(&stage2.final_curve),
        final_features: stage2.final_features,
        trace: stage2.trace,
        curves: ReportCurves {
            predicted_x0: stage1.map(|s| s.predicted_curve.clone()),
            initial: stage2.initial_curve,
            final_: stage2.final_curve,
        },
        ledger,
    }
}

/// Full run: both stages plus the report. Returns the stage-1 outcome too
/// so callers can export the search table.
pub fn run_pipeline_with_table(
    cfg: &PipelineConfig,
    keep_table: bool,
) -> Result<(DesignReport, Stage1Outcome), PipelineError> {
    let stage1 = run_stage1(cfg, keep_table)?;
    let y = stage1.search.best_config.clone();
    let stage2 = run_stage2(cfg, &y)?;
    Ok((assemble_report(cfg, &y, Some(&stage1), stage2), stage1))
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<DesignReport, PipelineError> {
    run_pipeline_with_table(cfg, false).map(|(r, _)| r)
}

/// Stage 2 alone, for a topology chosen elsewhere.
pub fn run_tuning(cfg: &PipelineConfig, y: &PortConfiguration) -> Result<DesignReport, PipelineError> {
    let m = cfg.port_count()?;
    if y.len() != m {
        return Err(PipelineError::Impm {
            stage: Stage::Tuning,
            source: ImpmError::ConfigurationLength {
                expected: m,
                got: y.len(),
            },
        });
    }
    let stage2 = run_stage2(cfg, y)?;
    Ok(assemble_report(cfg, y, None, stage2))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub max_abs_gamma_diff: f64,
    pub configurations: u64,
    /// True when every configuration was compared.
    pub exhaustive: bool,
}

/// Compares the port-reduction prediction with the direct nodal solve over
/// the whole sweep. Enumerates all configurations when `n_samples` covers
/// them, otherwise draws `n_samples` seeded random ones.
pub fn verify_against_oracle(cfg: &PipelineConfig, n_samples: u64, seed: u64) -> Result<OracleCheck, PipelineError> {
    if cfg.backend.kind != BackendKind::Synthetic {
        return Err(PipelineError::Config(
            "oracle verification needs the synthetic backend".into(),
        ));
    }
    let shape = cfg.shape()?;
    let ports = enumerate_ports(shape);
    let m = ports.len();
    let sweep = cfg.sweep()?;
    let circuit = circuit_at(cfg, &cfg.x0(), Stage::Verification)?;
    let z = extract_multiport(&circuit, &ports, &sweep).map_err(backend_err(Stage::Verification))?;
    let p = partition(&z);

    let exhaustive = m < 64 && n_samples >= 1u64 << m;
    let indices: Vec<u64> = if exhaustive {
        (0..1u64 << m).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_samples)
            .map(|_| {
                if m >= 64 {
                    rng.random()
                } else {
                    rng.random_range(0..1u64 << m)
                }
            })
            .collect()
    };

    let mut worst = 0.0f64;
    for &i in &indices {
        let y = PortConfiguration::from_index(i, m);
        let fast = evaluate_configuration(&p, &y, cfg.z0).map_err(|source| PipelineError::Impm {
            stage: Stage::Verification,
            source,
        })?;
        let direct =
            oracle_input_reflection(&circuit, &ports, &y, &sweep, cfg.z0).map_err(backend_err(Stage::Verification))?;
        for (a, b) in fast.gamma().iter().zip(direct.gamma()) {
            worst = worst.max((a - b).norm());
        }
    }
    Ok(OracleCheck {
        max_abs_gamma_diff: worst,
        configurations: indices.len() as u64,
        exhaustive,
    })
}

/// Curve as `freq_ghz,re_gamma,im_gamma,mag_db` rows.
pub fn curve_csv(curve: &ReflectionCurve) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("freq_ghz,re_gamma,im_gamma,mag_db\n");
    for ((f, g), db) in curve.freqs().iter().zip(curve.gamma()).zip(curve.mag_db()) {
        let _ = writeln!(out, "{f:.12e},{:.12e},{:.12e},{db:.12e}", g.re, g.im);
    }
    out
}
