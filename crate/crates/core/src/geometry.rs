//! Pixel lattice description: grid shape, the continuous design vector,
//! derived physical dimensions and the canonical enumeration of the
//! internal ports that bridge adjacent pixels.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("grid shape must have at least one row and one column (got {rows}x{cols})")]
    EmptyGrid { rows: usize, cols: usize },
    #[error("ground length l_g = {l_g} mm is not positive; alpha too large for the lattice")]
    NonPositiveGround { l_g: f64 },
    #[error("{name} = {value} mm must be positive")]
    NonPositiveDimension { name: &'static str, value: f64 },
}

/// Lattice of `n_rows` x `n_cols` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    n_rows: usize,
    n_cols: usize,
}

impl GridShape {
    pub fn new(n_rows: usize, n_cols: usize) -> Result<Self, GeometryError> {
        if n_rows == 0 || n_cols == 0 {
            return Err(GeometryError::EmptyGrid {
                rows: n_rows,
                cols: n_cols,
            });
        }
        Ok(Self { n_rows, n_cols })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_pixels(&self) -> usize {
        self.n_rows * self.n_cols
    }

    /// Row-major linear index of a pixel.
    pub fn pixel_index(&self, p: Pixel) -> usize {
        p.row * self.n_cols + p.col
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.row < self.n_rows && p.col < self.n_cols
    }
}

/// Number of internal ports between adjacent pixels.
pub fn port_count(shape: GridShape) -> usize {
    let (nx, ny) = (shape.n_rows, shape.n_cols);
    2 * nx * ny - (nx + ny)
}

/// Zero-based pixel coordinate. Displayed one-based as `(row,col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for Pixel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row + 1, self.col + 1)
    }
}

/// An internal port bridging two grid-adjacent pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InternalPort {
    pub a: Pixel,
    pub b: Pixel,
}

impl InternalPort {
    pub fn is_horizontal(&self) -> bool {
        self.a.row == self.b.row
    }
}

impl fmt::Display for InternalPort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.a, self.b)
    }
}

/// Ordered list of internal ports. Port `m` (zero-based here) sits at
/// multiport matrix index `m + 1`; index 0 is the external feed port.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortMap {
    shape: GridShape,
    ports: Vec<InternalPort>,
}

impl PortMap {
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn ports(&self) -> &[InternalPort] {
        &self.ports
    }

    pub fn len(&self) -> usize {
        self.ports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ports.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &InternalPort> {
        self.ports.iter()
    }
}

/// Canonical port ordering: every horizontal gap in row-major order, then
/// every vertical gap in row-major order.
pub fn enumerate_ports(shape: GridShape) -> PortMap {
    let mut ports = Vec::with_capacity(port_count(shape));
    for row in 0..shape.n_rows {
        for col in 0..shape.n_cols.saturating_sub(1) {
            ports.push(InternalPort {
                a: Pixel::new(row, col),
                b: Pixel::new(row, col + 1),
            });
        }
    }
    for row in 0..shape.n_rows.saturating_sub(1) {
        for col in 0..shape.n_cols {
            ports.push(InternalPort {
                a: Pixel::new(row, col),
                b: Pixel::new(row + 1, col),
            });
        }
    }
    PortMap { shape, ports }
}

/// Continuous design vector `[l, d, alpha, gamma]`, all in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    /// Pixel edge length.
    pub l: f64,
    /// Gap between neighbouring pixels.
    pub d: f64,
    /// Ground-length offset.
    pub alpha: f64,
    /// Feed-length parameter.
    pub gamma: f64,
}

impl GeometryParams {
    pub const DIM: usize = 4;
    pub const NAMES: [&'static str; 4] = ["l", "d", "alpha", "gamma"];
    pub const INITIAL: GeometryParams = GeometryParams::new(3.0, 0.2, 0.0, 3.0);
    pub const LOWER: GeometryParams = GeometryParams::new(3.0, 0.2, 0.0, 2.4);
    pub const UPPER: GeometryParams = GeometryParams::new(5.0, 0.6, 4.0, 5.0);

    pub const fn new(l: f64, d: f64, alpha: f64, gamma: f64) -> Self {
        Self { l, d, alpha, gamma }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.l, self.d, self.alpha, self.gamma]
    }

    /// Panics if `v` does not have exactly four entries.
    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), Self::DIM, "design vector must have 4 entries");
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<[f64; 4]> for GeometryParams {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// Physical dimensions derived from [`GeometryParams`] and the grid shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedDims {
    l_s: f64,
    l_m: f64,
    l_g: f64,
    w_g: f64,
}

impl DerivedDims {
    /// Feed line width, mm.
    pub const W_M: f64 = 3.0;
    pub const BETA: f64 = 0.4;
    /// Substrate margin, mm.
    pub const MARGIN: f64 = 3.0;

    /// Substrate side.
    pub fn l_s(&self) -> f64 {
        self.l_s
    }

    /// Feed length.
    pub fn l_m(&self) -> f64 {
        self.l_m
    }

    /// Ground length.
    pub fn l_g(&self) -> f64 {
        self.l_g
    }

    pub fn w_g(&self) -> f64 {
        self.w_g
    }

    pub fn w_m(&self) -> f64 {
        Self::W_M
    }
}

/// Evaluates the lattice dimension formulas. `l_m = w_g + gamma` together
/// with `w_g = beta * l_m` is resolved at its fixed point `gamma / (1 - beta)`.
pub fn derive_dimensions(x: &GeometryParams, shape: GridShape) -> Result<DerivedDims, GeometryError> {
    for (name, value) in [("l", x.l), ("d", x.d), ("gamma", x.gamma)] {
        if !(value > 0.0) {
            return Err(GeometryError::NonPositiveDimension { name, value });
        }
    }
    let ny = shape.n_cols as f64;
    let l_s = x.l * ny + x.d * (ny - 1.0) + 2.0 * DerivedDims::MARGIN;
    let l_m = x.gamma / (1.0 - DerivedDims::BETA);
    let w_g = DerivedDims::BETA * l_m;
    let l_g = l_s - x.alpha;
    if !(l_g > 0.0) {
        return Err(GeometryError::NonPositiveGround { l_g });
    }
    Ok(DerivedDims { l_s, l_m, l_g, w_g })
}
