//! Surrogate-assisted trust-region tuning of the continuous design vector.
//!
//! Each iteration linearises the response around the current design with a
//! large-step forward-difference Jacobian, minimises the objective of that
//! linear model inside a box trust region, and accepts the candidate when
//! the true objective improves (`rho > 0`). The region is an infinity-norm
//! box scaled per parameter by its bound range, so `delta = 1` spans the
//! whole feasible box.
//!
//! Cost model: the surrogate at the starting point costs `D + 1`
//! evaluations, every accepted step costs `D + 1` (the candidate plus the
//! `D` perturbations of the rebuilt Jacobian) and every rejected step costs
//! one evaluation, since rejected steps reuse the current surrogate.

use std::cell::Cell;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum TrustRegionError {
    #[error("invalid trust-region configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("component {index} = {value} lies outside [{lower}, {upper}]")]
    OutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("evaluation failed at {point:?}{}: {source}", perturbation_note(*.perturbed))]
    Evaluator {
        point: Vec<f64>,
        perturbed: Option<usize>,
        #[source]
        source: BoxError,
    },
    #[error("feature extraction failed at {point:?}{}: {source}", perturbation_note(*.perturbed))]
    FeatureLoss {
        point: Vec<f64>,
        perturbed: Option<usize>,
        #[source]
        source: BoxError,
    },
    #[error("objective failed on an evaluated response: {0}")]
    Objective(#[source] BoxError),
    #[error("surrogate predicts no objective change")]
    ZeroModelChange,
}

fn perturbation_note(p: Option<usize>) -> String {
    p.map(|k| format!(" (perturbing component {k})")).unwrap_or_default()
}

/// Box constraints `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, TrustRegionError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(TrustRegionError::InvalidBounds(format!(
                "lower has {} entries, upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        if let Some(k) =
            (0..lower.len()).find(|&k| !(lower[k] < upper[k]) || !upper[k].is_finite() || !lower[k].is_finite())
        {
            return Err(TrustRegionError::InvalidBounds(format!(
                "component {k}: need finite lower < upper (got {} .. {})",
                lower[k], upper[k]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn range(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn check(&self, x: &[f64]) -> Result<(), TrustRegionError> {
        if x.len() != self.dim() {
            return Err(TrustRegionError::InvalidBounds(format!(
                "point has {} components, bounds have {}",
                x.len(),
                self.dim()
            )));
        }
        for (k, &v) in x.iter().enumerate() {
            if !(v >= self.lower[k] && v <= self.upper[k]) {
                return Err(TrustRegionError::OutOfBounds {
                    index: k,
                    value: v,
                    lower: self.lower[k],
                    upper: self.upper[k],
                });
            }
        }
        Ok(())
    }

    /// Infinity norm of `a - b` with each component divided by its range.
    pub fn normalized_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(k, (x, y))| (x - y).abs() / self.range(k))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustRegionConfig {
    /// Initial radius, in units of the bound ranges.
    pub delta0: f64,
    pub expand: f64,
    pub shrink: f64,
    pub rho_hi: f64,
    pub rho_lo: f64,
    /// Stop once the radius or a candidate step falls below this.
    pub epsilon: f64,
    /// Finite-difference step as a fraction of each bound range.
    pub fd_step: f64,
    /// Cap on evaluated steps (accepted plus rejected).
    pub max_iterations: usize,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            delta0: 1.0,
            expand: 2.0,
            shrink: 1.0 / 3.0,
            rho_hi: 0.75,
            rho_lo: 0.25,
            epsilon: 1e-2,
            fd_step: 0.02,
            max_iterations: 50,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<(), TrustRegionError> {
        let bad = |m: &str| Err(TrustRegionError::InvalidConfig(m.to_string()));
        if !(0.0 < self.rho_lo && self.rho_lo < self.rho_hi && self.rho_hi < 1.0) {
            return bad("need 0 < rho_lo < rho_hi < 1");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.fd_step > 0.0 && self.fd_step < 1.0) {
            return bad("fd_step must lie in (0, 1)");
        }
        if !(self.delta0 > 0.0) || !(self.expand > 1.0) || !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("need delta0 > 0, expand > 1 and 0 < shrink < 1");
        }
        Ok(())
    }
}

/// First-order model `R(x) ~ R(anchor) + J (x - anchor)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    anchor: Vec<f64>,
    response: Vec<f64>,
    jacobian: DMatrix<f64>,
}

impl LinearSurrogate {
    pub fn new(anchor: Vec<f64>, response: Vec<f64>, jacobian: DMatrix<f64>) -> Self {
        assert_eq!(jacobian.nrows(), response.len());
        assert_eq!(jacobian.ncols(), anchor.len());
        Self {
            anchor,
            response,
            jacobian,
        }
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.response.clone();
        self.predict_into(x, &mut out);
        out
    }

    fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.response);
        for (k, (xi, ai)) in x.iter().zip(&self.anchor).enumerate() {
            let dx = xi - ai;
            if dx == 0.0 {
                continue;
            }
            for (o, j) in out.iter_mut().zip(self.jacobian.column(k).iter()) {
                *o += j * dx;
            }
        }
    }
}

/// Why a response could not be produced.
enum ResponseFailure {
    Evaluator(BoxError),
    Features(BoxError),
}

fn tag_failure(f: ResponseFailure, point: &[f64], perturbed: Option<usize>) -> TrustRegionError {
    match f {
        ResponseFailure::Evaluator(source) => TrustRegionError::Evaluator {
            point: point.to_vec(),
            perturbed,
            source,
        },
        ResponseFailure::Features(source) => TrustRegionError::FeatureLoss {
            point: point.to_vec(),
            perturbed,
            source,
        },
    }
}

fn fd_columns<F>(
    respond: &mut F,
    x: &[f64],
    anchor_response: Vec<f64>,
    bounds: &Bounds,
    fd_step: f64,
) -> Result<LinearSurrogate, TrustRegionError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, ResponseFailure>,
{
    let d = x.len();
    let n = anchor_response.len();
    let mut jac = DMatrix::zeros(n, d);
    for k in 0..d {
        let mut h = fd_step * bounds.range(k);
        if x[k] + h > bounds.upper()[k] {
            h = -h;
        }
        let mut xp = x.to_vec();
        xp[k] += h;
        let r = respond(&xp).map_err(|f| tag_failure(f, &xp, Some(k)))?;
        if r.len() != n {
            return Err(TrustRegionError::Evaluator {
                point: xp,
                perturbed: Some(k),
                source: format!("response length changed from {n} to {}", r.len()).into(),
            });
        }
        for i in 0..n {
            jac[(i, k)] = (r[i] - anchor_response[i]) / h;
        }
    }
    Ok(LinearSurrogate::new(x.to_vec(), anchor_response, jac))
}

/// Forward-difference Jacobian with step `fd_step * (upper - lower)` per
/// component, flipped backward where the forward step would leave the box.
/// Calls the evaluator exactly `D + 1` times.
pub fn jacobian_fd<F, E>(
    mut evaluator: F,
    x: &[f64],
    bounds: &Bounds,
    fd_step: f64,
) -> Result<LinearSurrogate, TrustRegionError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, E>,
    E: Into<BoxError>,
{
    bounds.check(x)?;
    let mut respond = |p: &[f64]| evaluator(p).map_err(|e| ResponseFailure::Evaluator(e.into()));
    let anchor = respond(x).map_err(|f| tag_failure(f, x, None))?;
    fd_columns(&mut respond, x, anchor, bounds, fd_step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub x: Vec<f64>,
    /// Objective of the surrogate at `x`.
    pub model_value: f64,
    /// Objective of the surrogate at the anchor.
    pub anchor_value: f64,
}

const SUBPROBLEM_SAMPLES: usize = 256;
const SUBPROBLEM_SEED: u64 = 0x7275_7374;
const POLISH_ROUNDS: usize = 400;

/// Minimises `objective(surrogate(x))` over the trust-region box using only
/// surrogate predictions: box vertices, uniform samples and the anchor seed
/// a coordinate pattern search.
pub fn solve_subproblem<O, E>(
    s: &LinearSurrogate,
    objective: &O,
    bounds: &Bounds,
    delta: f64,
) -> Result<SubproblemSolution, TrustRegionError>
where
    O: Fn(&[f64]) -> Result<f64, E>,
    E: Into<BoxError>,
{
    let d = s.anchor.len();
    let a = &s.anchor;
    let lo: Vec<f64> = (0..d)
        .map(|k| (a[k] - delta * bounds.range(k)).max(bounds.lower()[k]))
        .collect();
    let hi: Vec<f64> = (0..d)
        .map(|k| (a[k] + delta * bounds.range(k)).min(bounds.upper()[k]))
        .collect();

    let anchor_value = objective(&s.response).map_err(|e| TrustRegionError::Objective(e.into()))?;
    let mut buf = vec![0.0; s.response.len()];
    let mut score = |x: &[f64]| -> f64 {
        s.predict_into(x, &mut buf);
        match objective(&buf) {
            Ok(v) if !v.is_nan() => v,
            _ => f64::INFINITY,
        }
    };

    let mut best = a.clone();
    let mut best_val = anchor_value;
    let consider = |x: Vec<f64>, best: &mut Vec<f64>, best_val: &mut f64, score: &mut dyn FnMut(&[f64]) -> f64| {
        let v = score(&x);
        if v < *best_val {
            *best_val = v;
            *best = x;
        }
    };

    if d <= 16 {
        for mask in 0u32..(1 << d) {
            let v: Vec<f64> = (0..d).map(|k| if mask >> k & 1 == 1 { hi[k] } else { lo[k] }).collect();
            consider(v, &mut best, &mut best_val, &mut score);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SUBPROBLEM_SEED);
    for _ in 0..SUBPROBLEM_SAMPLES {
        let v: Vec<f64> = (0..d).map(|k| lo[k] + (hi[k] - lo[k]) * rng.random::<f64>()).collect();
        consider(v, &mut best, &mut best_val, &mut score);
    }

    let mut step: Vec<f64> = (0..d).map(|k| 0.25 * (hi[k] - lo[k])).collect();
    let floor: Vec<f64> = (0..d).map(|k| 1e-12 * bounds.range(k)).collect();
    for _ in 0..POLISH_ROUNDS {
        let mut improved = false;
        for k in 0..d {
            for sign in [1.0, -1.0] {
                let mut t = best.clone();
                t[k] = (best[k] + sign * step[k]).clamp(lo[k], hi[k]);
                if t[k] == best[k] {
                    continue;
                }
                let v = score(&t);
                if v < best_val {
                    best_val = v;
                    best = t;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step.iter_mut().for_each(|h| *h *= 0.5);
            if step.iter().zip(&floor).all(|(h, f)| h <= f) {
                break;
            }
        }
    }

    Ok(SubproblemSolution {
        x: best,
        model_value: best_val,
        anchor_value,
    })
}

/// Ratio of actual to predicted objective change.
pub fn gain_ratio(
    u_actual_new: f64,
    u_actual_old: f64,
    u_model_new: f64,
    u_model_old: f64,
) -> Result<f64, TrustRegionError> {
    let den = u_model_new - u_model_old;
    if den.abs() < 1e-15 {
        return Err(TrustRegionError::ZeroModelChange);
    }
    Ok((u_actual_new - u_actual_old) / den)
}

/// Radius after a step with gain ratio `rho`; a missing ratio (no usable
/// prediction or a failed evaluation) shrinks. Ratios exactly at the
/// thresholds leave the radius unchanged.
pub fn update_radius(delta: f64, rho: Option<f64>, cfg: &TrustRegionConfig) -> f64 {
    match rho {
        Some(r) if r > cfg.rho_hi => delta * cfg.expand,
        Some(r) if r >= cfg.rho_lo => delta,
        _ => delta * cfg.shrink,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    RadiusBelowEpsilon,
    StepBelowEpsilon,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Candidate design.
    pub x: Vec<f64>,
    /// True objective at the candidate; `None` when its response was unusable.
    pub u: Option<f64>,
    /// Surrogate objective at the candidate.
    pub u_model: f64,
    pub rho: Option<f64>,
    /// Radius the candidate was computed with.
    pub delta: f64,
    /// Radius after the update rule.
    pub delta_next: f64,
    pub accepted: bool,
    pub step_norm: f64,
    pub cumulative_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationTrace {
    pub dimension: usize,
    pub x0: Vec<f64>,
    pub u0: f64,
    pub delta0: f64,
    /// Evaluations spent on the surrogate at `x0` (`D + 1`).
    pub initial_evals: usize,
    pub records: Vec<IterationRecord>,
    pub evaluations: usize,
    pub x_star: Vec<f64>,
    pub u_star: f64,
    pub termination: Termination,
}

impl OptimizationTrace {
    pub fn accepted_steps(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }

    pub fn rejected_steps(&self) -> usize {
        self.records.len() - self.accepted_steps()
    }

    /// Accepted designs including the starting point; each one owns a
    /// surrogate built with `D + 1` evaluations.
    pub fn accepted_designs(&self) -> usize {
        1 + self.accepted_steps()
    }

    /// Evaluation count implied by the cost model.
    pub fn expected_evaluations(&self) -> usize {
        self.accepted_designs() * (self.dimension + 1) + self.rejected_steps()
    }

    /// Objective values of the accepted designs, in order.
    pub fn accepted_values(&self) -> Vec<f64> {
        std::iter::once(self.u0)
            .chain(self.records.iter().filter(|r| r.accepted).filter_map(|r| r.u))
            .collect()
    }

    /// `iteration,U,rho,delta,accepted,cumulative_evals`; row 0 is the start.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,U,rho,delta,accepted,cumulative_evals\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.12e}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "0,{:.12e},,{:.12e},true,{}",
            self.u0, self.delta0, self.initial_evals
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{:.12e},{},{}",
                r.iteration,
                opt(r.u),
                opt(r.rho),
                r.delta,
                r.accepted,
                r.cumulative_evals
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serialisation cannot fail")
    }
}

fn run_loop<F, O, E>(
    mut respond: F,
    objective: &O,
    x0: &[f64],
    bounds: &Bounds,
    config: &TrustRegionConfig,
) -> Result<(Vec<f64>, OptimizationTrace), TrustRegionError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, ResponseFailure>,
    O: Fn(&[f64]) -> Result<f64, E>,
    E: Into<BoxError>,
{
    config.validate()?;
    bounds.check(x0)?;
    let d = x0.len();
    let evals = Cell::new(0usize);
    let mut counted = |p: &[f64]| {
        evals.set(evals.get() + 1);
        respond(p)
    };

    let anchor_response = counted(x0).map_err(|f| tag_failure(f, x0, None))?;
    let mut surrogate = fd_columns(&mut counted, x0, anchor_response, bounds, config.fd_step)?;
    let u0 = objective(surrogate.response()).map_err(|e| TrustRegionError::Objective(e.into()))?;
    let initial_evals = d + 1;

    let mut x = x0.to_vec();
    let mut u = u0;
    let mut delta = config.delta0;
    let mut records = Vec::new();
    let termination = loop {
        if delta < config.epsilon {
            break Termination::RadiusBelowEpsilon;
        }
        if records.len() >= config.max_iterations {
            break Termination::MaxIterations;
        }
        let sol = solve_subproblem(&surrogate, objective, bounds, delta)?;
        let step_norm = bounds.normalized_distance(&sol.x, &x);
        if step_norm < config.epsilon {
            break Termination::StepBelowEpsilon;
        }

        let outcome = counted(&sol.x);
        let (u_new, response) = match outcome {
            Ok(r) => {
                let v = objective(&r).map_err(|e| TrustRegionError::Objective(e.into()))?;
                (Some(v), Some(r))
            }
            Err(ResponseFailure::Features(_)) => (None, None),
            Err(f) => return Err(tag_failure(f, &sol.x, None)),
        };
        let rho = u_new.and_then(|un| gain_ratio(un, u, sol.model_value, sol.anchor_value).ok());
        let accepted = rho.is_some_and(|r| r > 0.0);
        let delta_next = update_radius(delta, rho, config);

        if accepted {
            x = sol.x.clone();
            u = u_new.expect("accepted steps carry a value");
            let response = response.expect("accepted steps carry a response");
            surrogate = fd_columns(&mut counted, &x, response, bounds, config.fd_step)?;
        }
        records.push(IterationRecord {
            iteration: records.len() + 1,
            x: sol.x,
            u: u_new,
            u_model: sol.model_value,
            rho,
            delta,
            delta_next,
            accepted,
            step_norm,
            cumulative_evals: evals.get(),
        });
        delta = delta_next;
    };

    let trace = OptimizationTrace {
        dimension: d,
        x0: x0.to_vec(),
        u0,
        delta0: config.delta0,
        initial_evals,
        records,
        evaluations: evals.get(),
        x_star: x.clone(),
        u_star: u,
        termination,
    };
    Ok((x, trace))
}

/// Trust-region minimisation of `objective(evaluator(x))` with a surrogate
/// that is linear in the raw response vector.
pub fn tr_optimize<F, E, O, OE>(
    mut evaluator: F,
    objective: O,
    x0: &[f64],
    bounds: &Bounds,
    config: &TrustRegionConfig,
) -> Result<(Vec<f64>, OptimizationTrace), TrustRegionError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, E>,
    E: Into<BoxError>,
    O: Fn(&[f64]) -> Result<f64, OE>,
    OE: Into<BoxError>,
{
    run_loop(
        |p| evaluator(p).map_err(|e| ResponseFailure::Evaluator(e.into())),
        &objective,
        x0,
        bounds,
        config,
    )
}

/// Same loop with the surrogate built on extracted features: both the
/// subproblem and the gain ratio score feature vectors. A candidate whose
/// features cannot be extracted counts as a rejected step.
pub fn tr_optimize_features<F, R, E, X, XE, O, OE>(
    mut evaluator_raw: F,
    feature_extractor: X,
    objective_feature: O,
    x0: &[f64],
    bounds: &Bounds,
    config: &TrustRegionConfig,
) -> Result<(Vec<f64>, OptimizationTrace), TrustRegionError>
where
    F: FnMut(&[f64]) -> Result<R, E>,
    E: Into<BoxError>,
    X: Fn(&R) -> Result<Vec<f64>, XE>,
    XE: Into<BoxError>,
    O: Fn(&[f64]) -> Result<f64, OE>,
    OE: Into<BoxError>,
{
    run_loop(
        |p| {
            let raw = evaluator_raw(p).map_err(|e| ResponseFailure::Evaluator(e.into()))?;
            feature_extractor(&raw).map_err(|e| ResponseFailure::Features(e.into()))
        },
        &objective_feature,
        x0,
        bounds,
        config,
    )
}
