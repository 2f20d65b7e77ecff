//! Discretised domains, grid fields and the discrete calculus shared by
//! every other module.
//!
//! Two domains are supported. The shifted square `[1,2]^2` uses a uniform
//! tensor grid with trapezoidal weights. The unit disk uses a polar grid with
//! cell-centred rings `r_i = (i + 1/2) dr` plus a boundary ring at `r = 1`,
//! so no node sits on the coordinate singularity.
//!
//! Quadrature weights are in units of the normalised measure: they always
//! sum to one.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest supported number of nodes per axis.
pub const MIN_RESOLUTION: usize = 8;

/// Largest supported number of nodes per axis.
pub const MAX_RESOLUTION: usize = 2049;

/// Width, in mesh cells, of the boundary collar on which tangent fields vanish.
pub const COLLAR_CELLS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    /// The square `[1,2]^2`.
    SquareShifted,
    /// The unit disk, on a polar grid.
    UnitDisk,
}

/// Domain plus resolution.
///
/// For the square `n1 == n2` is the number of nodes per axis. For the disk
/// `n1` is the number of interior rings and `n2` the number of angles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub n1: usize,
    pub n2: usize,
}

impl DomainSpec {
    pub fn square(n: usize) -> Self {
        Self { kind: DomainKind::SquareShifted, n1: n, n2: n }
    }

    pub fn disk(n_r: usize, n_theta: usize) -> Self {
        Self { kind: DomainKind::UnitDisk, n1: n_r, n2: n_theta }
    }

    /// Lebesgue measure of the domain; inner products divide by it.
    pub fn measure_normalization(&self) -> f64 {
        match self.kind {
            DomainKind::SquareShifted => 1.0,
            DomainKind::UnitDisk => PI,
        }
    }
}

/// A cell face between an interior node `a` and a neighbour `b`.
#[derive(Clone, Copy, Debug)]
pub struct Face {
    pub a: usize,
    pub b: usize,
    /// Geometric flux coefficient, already divided by the domain measure.
    pub coef: f64,
    /// `b` is a boundary node.
    pub boundary: bool,
}

/// Discretised domain. Immutable after construction.
#[derive(Debug)]
pub struct Grid {
    spec: DomainSpec,
    nodes: Vec<[f64; 2]>,
    boundary: Vec<bool>,
    collar: Vec<bool>,
    interior_index: Vec<Option<usize>>,
    interior_nodes: Vec<usize>,
    weights: Vec<f64>,
    spacing: [f64; 2],
    faces: Vec<Face>,
    bandwidth: usize,
    /// Interior node whose value a boundary node copies.
    copy_source: Vec<Option<usize>>,
    /// Interior weights plus the weights of the boundary nodes copying them.
    param_weights: Vec<f64>,
}

/// Builds the grid for `spec`.
pub fn build_grid(spec: DomainSpec) -> Result<Arc<Grid>> {
    Grid::new(spec).map(Arc::new)
}

impl Grid {
    pub fn new(spec: DomainSpec) -> Result<Self> {
        for (name, n) in [("n1", spec.n1), ("n2", spec.n2)] {
            if n < MIN_RESOLUTION {
                return Err(Error::Resolution(format!(
                    "{name} = {n} is below the minimum of {MIN_RESOLUTION}"
                )));
            }
            if n > MAX_RESOLUTION {
                return Err(Error::Resolution(format!(
                    "{name} = {n} exceeds the maximum of {MAX_RESOLUTION}"
                )));
            }
        }
        match spec.kind {
            DomainKind::SquareShifted => {
                if spec.n1 != spec.n2 {
                    return Err(Error::Resolution(
                        "square grids need equal resolution on both axes".into(),
                    ));
                }
                Ok(Self::square(spec))
            }
            DomainKind::UnitDisk => {
                if spec.n2 % 2 != 0 {
                    return Err(Error::Resolution(
                        "disk grids need an even number of angles".into(),
                    ));
                }
                Ok(Self::disk(spec))
            }
        }
    }

    fn square(spec: DomainSpec) -> Self {
        let n = spec.n1;
        let h = 1.0 / (n - 1) as f64;
        let total = n * n;
        let mut nodes = Vec::with_capacity(total);
        let mut boundary = Vec::with_capacity(total);
        let mut collar = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for j in 0..n {
            for i in 0..n {
                nodes.push([1.0 + i as f64 * h, 1.0 + j as f64 * h]);
                let dist = i.min(j).min(n - 1 - i).min(n - 1 - j);
                boundary.push(dist == 0);
                collar.push(dist < COLLAR_CELLS);
                let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                weights.push(wi * wj * h * h);
            }
        }
        let (interior_index, interior_nodes) = index_interior(&boundary);
        let mut faces = Vec::new();
        for &a in &interior_nodes {
            for b in [a - 1, a + 1, a - n, a + n] {
                if boundary[b] || b > a {
                    faces.push(Face { a, b, coef: 1.0, boundary: boundary[b] });
                }
            }
        }
        Self {
            spec,
            nodes,
            boundary,
            collar,
            interior_index,
            interior_nodes,
            weights,
            spacing: [h, h],
            faces,
            bandwidth: n - 2,
            copy_source: Vec::new(),
            param_weights: Vec::new(),
        }
        .with_copy_sources(|k| {
            let (i, j) = (k % n, k / n);
            j.clamp(1, n - 2) * n + i.clamp(1, n - 2)
        })
    }

    fn disk(spec: DomainSpec) -> Self {
        let (nr, nt) = (spec.n1, spec.n2);
        let dr = 1.0 / (nr as f64 + 0.5);
        let dt = 2.0 * PI / nt as f64;
        let total = (nr + 1) * nt;
        let mut nodes = Vec::with_capacity(total);
        let mut boundary = Vec::with_capacity(total);
        let mut collar = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for i in 0..=nr {
            let r = if i == nr { 1.0 } else { (i as f64 + 0.5) * dr };
            for j in 0..nt {
                let phi = j as f64 * dt;
                nodes.push([r * phi.cos(), r * phi.sin()]);
                boundary.push(i == nr);
                collar.push(i + COLLAR_CELLS > nr);
                let w = if i == nr {
                    let inner = nr as f64 * dr;
                    0.5 * (1.0 - inner * inner) * dt / PI
                } else {
                    r * dr * dt / PI
                };
                weights.push(w);
            }
        }
        let (interior_index, interior_nodes) = index_interior(&boundary);
        // Exact angular second differences on cos(2 phi), so that harmonic
        // quadratics such as x1^2 - x2^2 are reproduced exactly.
        let kappa = dt * dt / (dt.sin() * dt.sin());
        let mut faces = Vec::new();
        for &a in &interior_nodes {
            let (i, j) = (a / nt, a % nt);
            let r = (i as f64 + 0.5) * dr;
            let r_out = (i as f64 + 1.0) * dr;
            let b = (i + 1) * nt + j;
            faces.push(Face { a, b, coef: r_out * dt / (PI * dr), boundary: i + 1 == nr });
            let b = i * nt + (j + 1) % nt;
            faces.push(Face { a, b, coef: kappa * dr / (PI * r * dt), boundary: false });
        }
        Self {
            spec,
            nodes,
            boundary,
            collar,
            interior_index,
            interior_nodes,
            weights,
            spacing: [dr, dt],
            faces,
            bandwidth: nt,
            copy_source: Vec::new(),
            param_weights: Vec::new(),
        }
        .with_copy_sources(|k| k - nt)
    }

    fn with_copy_sources(mut self, source: impl Fn(usize) -> usize) -> Self {
        self.copy_source = (0..self.nodes.len())
            .map(|k| self.boundary[k].then(|| source(k)))
            .collect();
        let mut pw: Vec<f64> = self.interior_nodes.iter().map(|&k| self.weights[k]).collect();
        for (k, src) in self.copy_source.iter().enumerate() {
            if let Some(a) = src {
                let ia = self.interior_index[*a].expect("copy source is interior");
                pw[ia] += self.weights[k];
            }
        }
        self.param_weights = pw;
        self
    }

    pub fn spec(&self) -> DomainSpec {
        self.spec
    }

    pub fn kind(&self) -> DomainKind {
        self.spec.kind
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }

    pub fn collar_mask(&self) -> &[bool] {
        &self.collar
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary[node]
    }

    /// Dense index of an interior node.
    pub fn interior_index(&self, node: usize) -> Option<usize> {
        self.interior_index[node]
    }

    /// Grid node of each dense interior index.
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior_nodes
    }

    pub fn interior_count(&self) -> usize {
        self.interior_nodes.len()
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.weights
    }

    /// `[h, h]` on the square, `[dr, dphi]` on the disk.
    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    /// Largest physical distance between neighbouring nodes.
    pub fn h_mesh(&self) -> f64 {
        match self.spec.kind {
            DomainKind::SquareShifted => self.spacing[0],
            DomainKind::UnitDisk => self.spacing[0].max(self.spacing[1]),
        }
    }

    /// Radial width of one cell; used for collar and support margins.
    pub fn cell_width(&self) -> f64 {
        self.spacing[0]
    }

    /// Weights of the parameter inner product on interior unknowns.
    ///
    /// Perturbations are extended to the boundary by copying the nearest
    /// interior value, which is also how boundary faces are closed, so each
    /// interior node carries the weight of the boundary nodes copying it.
    pub fn param_weights(&self) -> &[f64] {
        &self.param_weights
    }

    pub fn copy_source(&self, node: usize) -> Option<usize> {
        self.copy_source[node]
    }

    /// Overwrites boundary values with their copy sources.
    pub fn copy_extend(&self, values: &mut [f64]) {
        for (k, src) in self.copy_source.iter().enumerate() {
            if let Some(a) = src {
                values[k] = values[*a];
            }
        }
    }

    /// `W psi` pulled back to interior unknowns: boundary weights are added
    /// to their copy sources. Pairing with an interior vector `h` gives the
    /// quadrature of `psi h` with `h` copy-extended.
    pub fn pull_weighted(&self, values: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.interior_nodes.iter().map(|&k| self.weights[k] * values[k]).collect();
        for (k, src) in self.copy_source.iter().enumerate() {
            if let Some(a) = src {
                let ia = self.interior_index[*a].expect("copy source is interior");
                out[ia] += self.weights[k] * values[k];
            }
        }
        out
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Half bandwidth of the interior stiffness matrix in dense indexing.
    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    /// Ring and angle index of a disk node.
    pub fn polar_index(&self, node: usize) -> (usize, usize) {
        (node / self.spec.n2, node % self.spec.n2)
    }

    /// Radius of disk ring `i` (ring `n1` is the boundary).
    pub fn ring_radius(&self, i: usize) -> f64 {
        if i == self.spec.n1 {
            1.0
        } else {
            (i as f64 + 0.5) * self.spacing[0]
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.boundary_distance(p) >= 0.0
    }

    /// Signed distance to the boundary, positive inside.
    pub fn boundary_distance(&self, p: [f64; 2]) -> f64 {
        match self.spec.kind {
            DomainKind::SquareShifted => {
                (p[0] - 1.0).min(2.0 - p[0]).min(p[1] - 1.0).min(2.0 - p[1])
            }
            DomainKind::UnitDisk => 1.0 - (p[0] * p[0] + p[1] * p[1]).sqrt(),
        }
    }

    /// Outward unit normal at the boundary point nearest to `p`.
    pub fn outward_normal(&self, p: [f64; 2]) -> [f64; 2] {
        match self.spec.kind {
            DomainKind::SquareShifted => {
                let d = [p[0] - 1.0, 2.0 - p[0], p[1] - 1.0, 2.0 - p[1]];
                let normals = [[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]];
                let k = (0..4)
                    .min_by(|&a, &b| d[a].total_cmp(&d[b]))
                    .unwrap_or(0);
                normals[k]
            }
            DomainKind::UnitDisk => {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                if r == 0.0 {
                    [1.0, 0.0]
                } else {
                    [p[0] / r, p[1] / r]
                }
            }
        }
    }

    /// Bilinear interpolation of nodal values at `p`.
    ///
    /// Points slightly outside the domain are clamped onto it. On the disk
    /// values inside the innermost ring are interpolated linearly in `r`
    /// towards the ring average, which stands in for the origin value.
    pub fn interpolate<T: Interp>(&self, values: &[T], p: [f64; 2]) -> T {
        match self.spec.kind {
            DomainKind::SquareShifted => {
                let n = self.spec.n1;
                let h = self.spacing[0];
                let (i, fx) = cell_coord((p[0] - 1.0) / h, n - 1);
                let (j, fy) = cell_coord((p[1] - 1.0) / h, n - 1);
                let k = j * n + i;
                let lo = values[k].lerp(values[k + 1], fx);
                let hi = values[k + n].lerp(values[k + n + 1], fx);
                lo.lerp(hi, fy)
            }
            DomainKind::UnitDisk => {
                let (nr, nt) = (self.spec.n1, self.spec.n2);
                let (dr, dt) = (self.spacing[0], self.spacing[1]);
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let phi = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
                let t = phi / dt;
                let j0 = (t.floor() as usize).min(nt - 1);
                let ft = (t - j0 as f64).clamp(0.0, 1.0);
                let j1 = (j0 + 1) % nt;
                let ring = |i: usize| values[i * nt + j0].lerp(values[i * nt + j1], ft);
                let r0 = 0.5 * dr;
                if r < r0 {
                    let centre = T::mean(&values[..nt]);
                    centre.lerp(ring(0), r / r0)
                } else {
                    let (i, fr) = cell_coord((r - r0) / dr, nr);
                    ring(i).lerp(ring(i + 1), fr)
                }
            }
        }
    }
}

fn index_interior(boundary: &[bool]) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut index = vec![None; boundary.len()];
    let mut nodes = Vec::new();
    for (k, &b) in boundary.iter().enumerate() {
        if !b {
            index[k] = Some(nodes.len());
            nodes.push(k);
        }
    }
    (index, nodes)
}

/// Splits a continuous cell coordinate into a cell index in `0..cells` and
/// a clamped fraction.
fn cell_coord(s: f64, cells: usize) -> (usize, f64) {
    let s = s.clamp(0.0, cells as f64);
    let i = (s.floor() as usize).min(cells - 1);
    (i, s - i as f64)
}

/// Values that can be interpolated linearly.
pub trait Interp: Copy {
    fn lerp(self, other: Self, t: f64) -> Self;
    fn mean(values: &[Self]) -> Self;
}

impl Interp for f64 {
    fn lerp(self, other: Self, t: f64) -> Self {
        self + t * (other - self)
    }

    fn mean(values: &[Self]) -> Self {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

impl Interp for [f64; 2] {
    fn lerp(self, other: Self, t: f64) -> Self {
        [self[0] + t * (other[0] - self[0]), self[1] + t * (other[1] - self[1])]
    }

    fn mean(values: &[Self]) -> Self {
        let n = values.len() as f64;
        let s = values.iter().fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        [s[0] / n, s[1] / n]
    }
}

/// A function that can be evaluated anywhere in the plane.
pub trait SpatialFunction: Sync {
    fn value_at(&self, p: [f64; 2]) -> f64;

    /// Lower bound on `|x|` over the support, if known.
    fn min_support_radius(&self) -> Option<f64> {
        None
    }
}

impl<F: Fn([f64; 2]) -> f64 + Sync> SpatialFunction for F {
    fn value_at(&self, p: [f64; 2]) -> f64 {
        self(p)
    }
}

/// Real-valued grid function.
#[derive(Clone, Debug)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.node_count()] }
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Self {
        Self { grid: grid.clone(), values: vec![c; grid.node_count()] }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = grid.nodes().iter().map(|&p| f(p)).collect();
        Self { grid: grid.clone(), values }
    }

    pub fn from_function(grid: &Arc<Grid>, f: &dyn SpatialFunction) -> Self {
        Self::from_fn(grid, |p| f.value_at(p))
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::GridMismatch);
        }
        Ok(Self { grid: grid.clone(), values })
    }

    /// Lifts a dense interior vector, with zeros on the boundary.
    pub fn from_interior(grid: &Arc<Grid>, interior: &[f64]) -> Self {
        let mut values = vec![0.0; grid.node_count()];
        for (k, &node) in grid.interior_nodes().iter().enumerate() {
            values[node] = interior[k];
        }
        Self { grid: grid.clone(), values }
    }

    /// Parameter-space field from interior unknowns, copy-extended to the
    /// boundary.
    pub fn from_parameter(grid: &Arc<Grid>, interior: &[f64]) -> Self {
        let mut f = Self::from_interior(grid, interior);
        grid.copy_extend(&mut f.values);
        f
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn interior_values(&self) -> Vec<f64> {
        self.grid.interior_nodes().iter().map(|&k| self.values[k]).collect()
    }

    pub fn same_grid(&self, other: &ScalarField) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || self.grid.spec() == other.grid.spec()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn at(&self, p: [f64; 2]) -> f64 {
        self.grid.interpolate(&self.values, p)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &ScalarField) -> Result<Self> {
        if !self.same_grid(other) {
            return Err(Error::GridMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + s * b).collect();
        Ok(Self { grid: self.grid.clone(), values })
    }

    /// Copy with the boundary collar zeroed, i.e. the nearest tangent field.
    pub fn masked(&self) -> Self {
        let mut out = self.clone();
        for (v, &c) in out.values.iter_mut().zip(self.grid.collar_mask()) {
            if c {
                *v = 0.0;
            }
        }
        out
    }

    /// Vanishes on the boundary collar.
    pub fn is_tangent(&self) -> bool {
        self.values.iter().zip(self.grid.collar_mask()).all(|(&v, &c)| !c || v == 0.0)
    }
}

impl SpatialFunction for ScalarField {
    fn value_at(&self, p: [f64; 2]) -> f64 {
        self.at(p)
    }

    fn min_support_radius(&self) -> Option<f64> {
        if self.grid.kind() != DomainKind::UnitDisk {
            return None;
        }
        let nt = self.grid.spec().n2;
        let first = self.values.iter().position(|&v| v != 0.0)?;
        let ring = first / nt;
        if ring == 0 {
            return Some(0.0);
        }
        Some(self.grid.ring_radius(ring - 1))
    }
}

/// Grid function with two Cartesian components per node.
#[derive(Clone, Debug)]
pub struct VectorField {
    grid: Arc<Grid>,
    values: Vec<[f64; 2]>,
}

impl VectorField {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self { grid: grid.clone(), values: vec![[0.0; 2]; grid.node_count()] }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let values = grid.nodes().iter().map(|&p| f(p)).collect();
        Self { grid: grid.clone(), values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.values
    }

    pub fn component(&self, c: usize) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v[c]).collect(),
        }
    }

    pub fn at(&self, p: [f64; 2]) -> [f64; 2] {
        self.grid.interpolate(&self.values, p)
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v[0].hypot(v[1])))
    }

    /// Pointwise dot product.
    pub fn dot(&self, other: &VectorField) -> Result<ScalarField> {
        if self.grid.spec() != other.grid.spec() {
            return Err(Error::GridMismatch);
        }
        let values =
            self.values.iter().zip(&other.values).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).collect();
        Ok(ScalarField { grid: self.grid.clone(), values })
    }
}

/// Discrete `L^2` inner product against the normalised measure.
pub fn inner_l2(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    if !f.same_grid(g) {
        return Err(Error::GridMismatch);
    }
    Ok(f.values
        .iter()
        .zip(&g.values)
        .zip(f.grid.quad_weights())
        .map(|((a, b), w)| a * b * w)
        .sum())
}

pub fn norm_l2(f: &ScalarField) -> f64 {
    f.values
        .iter()
        .zip(f.grid.quad_weights())
        .map(|(a, w)| a * a * w)
        .sum::<f64>()
        .sqrt()
}

/// `L^2` product of the interpolants of `f` and `g` (see [`Grid::interpolate`]),
/// integrated exactly cell by cell with a 2 x 2 Gauss rule. This is the
/// second moment seen by uniform sampling.
pub fn inner_interpolated(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    if !f.same_grid(g) {
        return Err(Error::GridMismatch);
    }
    let grid = &f.grid;
    let gauss = [0.5 - 0.5 / 3f64.sqrt(), 0.5 + 0.5 / 3f64.sqrt()];
    let prod = |p: [f64; 2]| f.at(p) * g.at(p);
    let total = match grid.kind() {
        DomainKind::SquareShifted => {
            let (n, h) = (grid.spec.n1, grid.spacing[0]);
            let mut s = 0.0;
            for j in 0..n - 1 {
                for i in 0..n - 1 {
                    for a in gauss {
                        for b in gauss {
                            s += prod([1.0 + (i as f64 + a) * h, 1.0 + (j as f64 + b) * h]);
                        }
                    }
                }
            }
            0.25 * h * h * s
        }
        DomainKind::UnitDisk => {
            let (nr, nt) = (grid.spec.n1, grid.spec.n2);
            let dt = grid.spacing[1];
            // radial cells: the origin patch, then ring i to ring i + 1
            let mut edges = vec![0.0];
            edges.extend((0..=nr).map(|i| grid.ring_radius(i)));
            let mut s = 0.0;
            for w in edges.windows(2) {
                let (r0, r1) = (w[0], w[1]);
                for j in 0..nt {
                    for a in gauss {
                        let r = r0 + a * (r1 - r0);
                        for b in gauss {
                            let phi = (j as f64 + b) * dt;
                            s += 0.25 * (r1 - r0) * dt * r * prod([r * phi.cos(), r * phi.sin()]);
                        }
                    }
                }
            }
            s
        }
    };
    Ok(total / grid.spec.measure_normalization())
}

fn inner_vec(f: &VectorField, g: &VectorField) -> f64 {
    f.values
        .iter()
        .zip(&g.values)
        .zip(f.grid.quad_weights())
        .map(|((a, b), w)| (a[0] * b[0] + a[1] * b[1]) * w)
        .sum()
}

/// Second-order finite-difference gradient.
pub fn grad(f: &ScalarField) -> VectorField {
    let grid = &f.grid;
    let v = &f.values;
    let values = match grid.kind() {
        DomainKind::SquareShifted => {
            let n = grid.spec().n1;
            let h = grid.spacing()[0];
            (0..grid.node_count())
                .map(|k| {
                    let (i, j) = (k % n, k / n);
                    [axis_diff(v, k, i, 1, n, h), axis_diff(v, k, j, n, n, h)]
                })
                .collect()
        }
        DomainKind::UnitDisk => {
            let (nr, nt) = (grid.spec().n1, grid.spec().n2);
            let (dr, dt) = (grid.spacing()[0], grid.spacing()[1]);
            (0..grid.node_count())
                .map(|k| {
                    let (i, j) = (k / nt, k % nt);
                    let d_r = if i == 0 {
                        (v[nt + j] - v[(j + nt / 2) % nt]) / (2.0 * dr)
                    } else if i == nr {
                        (3.0 * v[k] - 4.0 * v[k - nt] + v[k - 2 * nt]) / (2.0 * dr)
                    } else {
                        (v[k + nt] - v[k - nt]) / (2.0 * dr)
                    };
                    let jp = i * nt + (j + 1) % nt;
                    let jm = i * nt + (j + nt - 1) % nt;
                    let d_phi = (v[jp] - v[jm]) / (2.0 * dt);
                    let r = grid.ring_radius(i);
                    let phi = j as f64 * dt;
                    let (s, c) = phi.sin_cos();
                    [c * d_r - s * d_phi / r, s * d_r + c * d_phi / r]
                })
                .collect()
        }
    };
    VectorField { grid: grid.clone(), values }
}

/// Derivative along one square axis: central inside, one-sided second order
/// at the ends. `pos` is the index along the axis and `stride` the node step.
fn axis_diff(v: &[f64], k: usize, pos: usize, stride: usize, n: usize, h: f64) -> f64 {
    if pos == 0 {
        (-3.0 * v[k] + 4.0 * v[k + stride] - v[k + 2 * stride]) / (2.0 * h)
    } else if pos == n - 1 {
        (3.0 * v[k] - 4.0 * v[k - stride] + v[k - 2 * stride]) / (2.0 * h)
    } else {
        (v[k + stride] - v[k - stride]) / (2.0 * h)
    }
}

/// Second-order finite-difference divergence.
pub fn div(field: &VectorField) -> ScalarField {
    let grid = &field.grid;
    let v = &field.values;
    let values = match grid.kind() {
        DomainKind::SquareShifted => {
            let n = grid.spec().n1;
            let h = grid.spacing()[0];
            let fx: Vec<f64> = v.iter().map(|x| x[0]).collect();
            let fy: Vec<f64> = v.iter().map(|x| x[1]).collect();
            (0..grid.node_count())
                .map(|k| {
                    let (i, j) = (k % n, k / n);
                    axis_diff(&fx, k, i, 1, n, h) + axis_diff(&fy, k, j, n, n, h)
                })
                .collect()
        }
        DomainKind::UnitDisk => {
            let (nr, nt) = (grid.spec().n1, grid.spec().n2);
            let (dr, dt) = (grid.spacing()[0], grid.spacing()[1]);
            // Polar components scaled for the conservative radial form.
            let mut r_fr = vec![0.0; v.len()];
            let mut f_phi = vec![0.0; v.len()];
            for (k, x) in v.iter().enumerate() {
                let (i, j) = (k / nt, k % nt);
                let (s, c) = (j as f64 * dt).sin_cos();
                r_fr[k] = grid.ring_radius(i) * (c * x[0] + s * x[1]);
                f_phi[k] = -s * x[0] + c * x[1];
            }
            (0..grid.node_count())
                .map(|k| {
                    let (i, j) = (k / nt, k % nt);
                    let r = grid.ring_radius(i);
                    let radial = if i == 0 {
                        // Across the origin the opposite node has signed
                        // radius -r0 and reversed radial direction.
                        (r_fr[nt + j] - r_fr[(j + nt / 2) % nt]) / (2.0 * dr)
                    } else if i == nr {
                        (3.0 * r_fr[k] - 4.0 * r_fr[k - nt] + r_fr[k - 2 * nt]) / (2.0 * dr)
                    } else {
                        (r_fr[k + nt] - r_fr[k - nt]) / (2.0 * dr)
                    };
                    let jp = i * nt + (j + 1) % nt;
                    let jm = i * nt + (j + nt - 1) % nt;
                    (radial + (f_phi[jp] - f_phi[jm]) / (2.0 * dt)) / r
                })
                .collect()
        }
    };
    ScalarField { grid: grid.clone(), values }
}

/// Flux-form Laplacian on interior nodes, zero on the boundary. On the
/// square this is the five-point stencil.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let grid = &f.grid;
    let w = grid.quad_weights();
    let mut out = vec![0.0; grid.node_count()];
    for face in grid.faces() {
        let flux = face.coef * (f.values[face.b] - f.values[face.a]);
        out[face.a] += flux;
        if !face.boundary {
            out[face.b] -= flux;
        }
    }
    for &k in grid.interior_nodes() {
        out[k] /= w[k];
    }
    ScalarField { grid: grid.clone(), values: out }
}

/// Discrete Sobolev norm of order 0, 1 or 2.
///
/// Second derivatives only enter through interior nodes.
pub fn sobolev_norm(f: &ScalarField, order: u8) -> Result<f64> {
    if order > 2 {
        return Err(Error::SobolevOrder(order));
    }
    let mut sq = norm_l2(f).powi(2);
    if order >= 1 {
        let g = grad(f);
        sq += inner_vec(&g, &g);
        if order == 2 {
            let gx = grad(&g.component(0));
            let gy = grad(&g.component(1));
            let w = f.grid.quad_weights();
            for &k in f.grid.interior_nodes() {
                let (xx, xy, yy) = (gx.values[k][0], 0.5 * (gx.values[k][1] + gy.values[k][0]), gy.values[k][1]);
                sq += (xx * xx + xy * xy + yy * yy) * w[k];
            }
        }
    }
    Ok(sq.sqrt())
}

/// Smooth compactly supported bump `A exp(-1/(1-s^2))`, `s = |x-c|/R`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    pub radius: f64,
    pub amplitude: f64,
}

impl Bump {
    pub fn new(center: [f64; 2], radius: f64, amplitude: f64) -> Self {
        Self { center, radius, amplitude }
    }

    /// Samples the bump, refusing supports that reach the collar.
    pub fn to_field(&self, grid: &Arc<Grid>) -> Result<ScalarField> {
        if !(self.radius > 0.0) {
            return Err(Error::InvalidArgument(format!("bump radius {} must be positive", self.radius)));
        }
        let margin = grid.boundary_distance(self.center) - self.radius;
        let need = COLLAR_CELLS as f64 * grid.cell_width();
        if margin < need {
            return Err(Error::BumpSupport(format!(
                "centre {:?}, radius {} leaves margin {margin:.4} < {need:.4}",
                self.center, self.radius
            )));
        }
        let field = ScalarField::from_function(grid, self);
        debug_assert!(field.is_tangent());
        Ok(field)
    }
}

impl SpatialFunction for Bump {
    fn value_at(&self, p: [f64; 2]) -> f64 {
        let s2 = ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2))
            / (self.radius * self.radius);
        mollifier(s2) * self.amplitude
    }

    fn min_support_radius(&self) -> Option<f64> {
        Some((self.center[0].hypot(self.center[1]) - self.radius).max(0.0))
    }
}

/// Radially symmetric bump supported on the annulus `r_in < |x| < r_out`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnularBump {
    pub r_in: f64,
    pub r_out: f64,
    pub amplitude: f64,
}

impl AnnularBump {
    pub fn radial(&self, r: f64) -> f64 {
        let s = (2.0 * r - self.r_in - self.r_out) / (self.r_out - self.r_in);
        mollifier(s * s) * self.amplitude
    }
}

impl SpatialFunction for AnnularBump {
    fn value_at(&self, p: [f64; 2]) -> f64 {
        self.radial(p[0].hypot(p[1]))
    }

    fn min_support_radius(&self) -> Option<f64> {
        Some(self.r_in)
    }
}

/// `exp(-1/(1-s2))` for `s2 < 1`, else 0.
pub fn mollifier(s2: f64) -> f64 {
    if s2 < 1.0 {
        (-1.0 / (1.0 - s2)).exp()
    } else {
        0.0
    }
}

pub fn make_bump(grid: &Arc<Grid>, center: [f64; 2], radius: f64, amplitude: f64) -> Result<ScalarField> {
    Bump::new(center, radius, amplitude).to_field(grid)
}

/// Truncated double-sine series with `|k|^-3` decaying Gaussian coefficients.
///
/// The series lives on the bounding box of the domain, so the same
/// coefficients give matched fields on every resolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SineSeries {
    pub modes: usize,
    pub coefficients: Vec<f64>,
}

impl SineSeries {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, modes: usize) -> Self {
        let mut coefficients = Vec::with_capacity(modes * modes);
        for k in 1..=modes {
            for l in 1..=modes {
                let z: f64 = rng.sample(StandardNormal);
                let norm = ((k * k + l * l) as f64).sqrt();
                coefficients.push(z * norm.powi(-3));
            }
        }
        Self { modes, coefficients }
    }

    /// Value at `p`; `kind` picks the box map and the disk taper.
    pub fn eval(&self, kind: DomainKind, p: [f64; 2]) -> f64 {
        let (u, v, taper) = match kind {
            DomainKind::SquareShifted => (p[0] - 1.0, p[1] - 1.0, 1.0),
            DomainKind::UnitDisk => {
                let r2 = p[0] * p[0] + p[1] * p[1];
                (0.5 * (p[0] + 1.0), 0.5 * (p[1] + 1.0), (1.0 - r2).max(0.0))
            }
        };
        let su: Vec<f64> = (1..=self.modes).map(|k| (k as f64 * PI * u).sin()).collect();
        let sv: Vec<f64> = (1..=self.modes).map(|l| (l as f64 * PI * v).sin()).collect();
        let mut acc = 0.0;
        for (a, row) in su.iter().zip(self.coefficients.chunks(self.modes)) {
            acc += a * row.iter().zip(&sv).map(|(c, b)| c * b).sum::<f64>();
        }
        taper * acc
    }

    /// Samples the series and zeroes the collar.
    pub fn tangent_field(&self, grid: &Arc<Grid>) -> ScalarField {
        let kind = grid.kind();
        ScalarField::from_fn(grid, |p| self.eval(kind, p)).masked()
    }
}

/// Writes `x,y,value` rows preceded by a JSON header comment.
pub fn write_csv<W: Write>(field: &ScalarField, mut out: W) -> Result<()> {
    let spec = field.grid.spec();
    let header = serde_json::json!({
        "kind": spec.kind,
        "n1": spec.n1,
        "n2": spec.n2,
        "normalization": spec.measure_normalization(),
    });
    writeln!(out, "# {header}")?;
    writeln!(out, "x,y,value")?;
    for (p, v) in field.grid.nodes().iter().zip(&field.values) {
        writeln!(out, "{},{},{}", p[0], p[1], v)?;
    }
    Ok(())
}
