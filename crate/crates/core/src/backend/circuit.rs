//! Lumped-circuit stand-in for the pixel radiator and its nodal solvers.
//!
//! Units: inductance nH, capacitance pF, frequency GHz, so that
//! `omega * L` and `1 / (omega * C)` come out in ohms after the 1e3 factor
//! on capacitive terms.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use super::{BackendError, FrequencySweep, MultiportZ};
use crate::geometry::{derive_dimensions, enumerate_ports, GeometryParams, GridShape, Pixel, PortMap};
use crate::impm::{reflection, PortConfiguration, ReflectionCurve};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CircuitModel {
    pub shape: GridShape,
    /// Pixel shunt branch (series RLC to ground).
    pub r_pix: f64,
    pub l_pix: f64,
    pub c_pix: f64,
    /// Capacitance across every inter-pixel gap.
    pub c_gap: f64,
    /// Series branch from the feed node to the feed pixel.
    pub r_feed: f64,
    pub l_feed: f64,
    /// Shunt capacitance at the feed node.
    pub c_feed: f64,
    pub feed_pixel: Pixel,
}

/// Maps the design vector onto element values. The feed attaches to the
/// bottom-row pixel in column `ceil(N_y / 2)`.
pub fn build_circuit(x: &GeometryParams, shape: GridShape, substrate_h: f64) -> Result<CircuitModel, BackendError> {
    let dims = derive_dimensions(x, shape)?;
    if !(substrate_h > 0.0) {
        return Err(crate::geometry::GeometryError::NonPositiveDimension {
            name: "substrate_h",
            value: substrate_h,
        }
        .into());
    }
    Ok(CircuitModel {
        shape,
        r_pix: 0.5,
        l_pix: 0.8 * x.l,
        c_pix: 0.05 * x.l * x.l / substrate_h,
        c_gap: 0.02 * x.l / x.d,
        r_feed: 0.2,
        l_feed: 0.6 * dims.l_m(),
        c_feed: 0.01 * dims.l_g(),
        feed_pixel: Pixel::new(shape.n_rows() - 1, shape.n_cols().div_ceil(2) - 1),
    })
}

impl CircuitModel {
    fn validate(&self) -> Result<(), BackendError> {
        let ok = self.r_pix >= 0.0
            && self.r_feed >= 0.0
            && self.l_pix > 0.0
            && self.l_feed > 0.0
            && self.c_pix > 0.0
            && self.c_gap > 0.0
            && self.c_feed > 0.0;
        if !ok {
            return Err(BackendError::PortMismatch(
                "circuit elements must satisfy R >= 0, L > 0, C > 0".into(),
            ));
        }
        if !self.shape.contains(self.feed_pixel) {
            return Err(BackendError::PortMismatch(format!(
                "feed pixel {} outside the grid",
                self.feed_pixel
            )));
        }
        Ok(())
    }

    fn check_ports(&self, ports: &PortMap) -> Result<(), BackendError> {
        if ports.shape() != self.shape {
            return Err(BackendError::PortMismatch(format!(
                "port map is for a {}x{} grid, circuit is {}x{}",
                ports.shape().n_rows(),
                ports.shape().n_cols(),
                self.shape.n_rows(),
                self.shape.n_cols()
            )));
        }
        Ok(())
    }

    fn feed_node(&self) -> usize {
        self.shape.n_pixels()
    }

    fn admittances(&self, f_ghz: f64) -> Elements {
        let w = 2.0 * PI * f_ghz;
        let j = Complex64::i();
        let cap = |c: f64| j * w * c * 1e-3;
        let z_pix = Complex64::new(self.r_pix, w * self.l_pix - 1e3 / (w * self.c_pix));
        Elements {
            pixel: z_pix.inv(),
            gap: cap(self.c_gap),
            feed_series: Complex64::new(self.r_feed, w * self.l_feed).inv(),
            feed_shunt: cap(self.c_feed),
        }
    }
}

struct Elements {
    pixel: Complex64,
    gap: Complex64,
    feed_series: Complex64,
    feed_shunt: Complex64,
}

fn stamp_branch(y: &mut DMatrix<Complex64>, a: usize, b: usize, g: Complex64) {
    y[(a, a)] += g;
    y[(b, b)] += g;
    y[(a, b)] -= g;
    y[(b, a)] -= g;
}

/// Nodal admittance matrix with ground as reference. `node_of` maps every
/// pixel onto a reduced node index; pixels sharing an index are shorted.
fn assemble(circuit: &CircuitModel, el: &Elements, node_of: &[usize], n_pixel_nodes: usize) -> DMatrix<Complex64> {
    let feed = n_pixel_nodes;
    let mut y = DMatrix::zeros(n_pixel_nodes + 1, n_pixel_nodes + 1);
    for &node in node_of {
        y[(node, node)] += el.pixel;
    }
    for gap in enumerate_ports(circuit.shape).iter() {
        let a = node_of[circuit.shape.pixel_index(gap.a)];
        let b = node_of[circuit.shape.pixel_index(gap.b)];
        if a != b {
            stamp_branch(&mut y, a, b, el.gap);
        }
    }
    let fp = node_of[circuit.shape.pixel_index(circuit.feed_pixel)];
    stamp_branch(&mut y, feed, fp, el.feed_series);
    y[(feed, feed)] += el.feed_shunt;
    y
}

/// Open-circuit impedance matrix of the feed port plus every internal port,
/// computed by unit-current injection into each port's node pair.
pub fn extract_multiport(
    circuit: &CircuitModel,
    ports: &PortMap,
    sweep: &FrequencySweep,
) -> Result<MultiportZ, BackendError> {
    circuit.validate()?;
    circuit.check_ports(ports)?;
    let shape = circuit.shape;
    let identity: Vec<usize> = (0..shape.n_pixels()).collect();
    let feed = circuit.feed_node();
    let n = ports.len() + 1;
    // (positive node, negative node) per port; None is ground.
    let terminals: Vec<(usize, Option<usize>)> = std::iter::once((feed, None))
        .chain(
            ports
                .iter()
                .map(|p| (shape.pixel_index(p.a), Some(shape.pixel_index(p.b)))),
        )
        .collect();

    let matrices = sweep
        .points()
        .par_iter()
        .map(|&f| {
            let y = assemble(circuit, &circuit.admittances(f), &identity, shape.n_pixels());
            let mut rhs = DMatrix::<Complex64>::zeros(feed + 1, n);
            for (k, &(p, m)) in terminals.iter().enumerate() {
                rhs[(p, k)] += 1.0;
                if let Some(m) = m {
                    rhs[(m, k)] -= 1.0;
                }
            }
            let v = y
                .lu()
                .solve(&rhs)
                .filter(|v| v.iter().all(|z| z.is_finite()))
                .ok_or(BackendError::SingularSystem { freq_ghz: f })?;
            Ok(DMatrix::from_fn(n, n, |i, k| {
                let (p, m) = terminals[i];
                v[(p, k)] - m.map_or(Complex64::new(0.0, 0.0), |m| v[(m, k)])
            }))
        })
        .collect::<Result<Vec<_>, BackendError>>()?;
    MultiportZ::new(sweep.clone(), 50.0, matrices)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Pixel -> reduced node index after merging the pixels of every closed port.
fn merge_closed(shape: GridShape, ports: &PortMap, y: &PortConfiguration) -> (Vec<usize>, usize) {
    let n = shape.n_pixels();
    let mut parent: Vec<usize> = (0..n).collect();
    for (port, closed) in ports.iter().zip(y.states()) {
        if closed.is_closed() {
            let a = find(&mut parent, shape.pixel_index(port.a));
            let b = find(&mut parent, shape.pixel_index(port.b));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut node_of = vec![0; n];
    let mut next = 0;
    for (i, node) in node_of.iter_mut().enumerate() {
        let root = find(&mut parent, i);
        if label[root] == usize::MAX {
            label[root] = next;
            next += 1;
        }
        *node = label[root];
    }
    (node_of, next)
}

/// Feed-port input impedance with every closed port realised as an exact
/// node merge, solved directly by nodal analysis.
pub fn oracle_input_impedance(
    circuit: &CircuitModel,
    ports: &PortMap,
    y: &PortConfiguration,
    sweep: &FrequencySweep,
) -> Result<Vec<Complex64>, BackendError> {
    circuit.validate()?;
    circuit.check_ports(ports)?;
    if y.len() != ports.len() {
        return Err(BackendError::PortMismatch(format!(
            "configuration has {} ports, port map has {}",
            y.len(),
            ports.len()
        )));
    }
    let (node_of, n_nodes) = merge_closed(circuit.shape, ports, y);
    sweep
        .points()
        .par_iter()
        .map(|&f| {
            let ymat = assemble(circuit, &circuit.admittances(f), &node_of, n_nodes);
            let mut rhs = DVector::<Complex64>::zeros(n_nodes + 1);
            rhs[n_nodes] = Complex64::new(1.0, 0.0);
            ymat.lu()
                .solve(&rhs)
                .map(|v| v[n_nodes])
                .filter(|z| z.is_finite())
                .ok_or(BackendError::SingularSystem { freq_ghz: f })
        })
        .collect()
}

pub fn oracle_input_reflection(
    circuit: &CircuitModel,
    ports: &PortMap,
    y: &PortConfiguration,
    sweep: &FrequencySweep,
    z0: f64,
) -> Result<ReflectionCurve, BackendError> {
    let z_in = oracle_input_impedance(circuit, ports, y, sweep)?;
    let gamma = z_in
        .iter()
        .zip(sweep.points())
        .map(|(&z, &f)| reflection(z, z0).map_err(|_| BackendError::SingularSystem { freq_ghz: f }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReflectionCurve::new(sweep.clone(), gamma))
}
