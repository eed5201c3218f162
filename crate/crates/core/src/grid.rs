//! Uniform cell-centred grids on rectangles with homogeneous Neumann walls.
//!
//! Cells are ordered row-major with `x` fastest. Gradients live on interior
//! faces; boundary faces carry zero flux and are not stored, which is what
//! makes the discrete divergence theorem (and hence mass conservation) exact.

use std::io::{BufRead, Write};
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, BandMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    cells: [usize; 2],
    lengths: [f64; 2],
}

impl GridSpec {
    pub fn new(cells: &[usize], lengths: &[f64]) -> Result<Self> {
        let dim = cells.len();
        if !(1..=2).contains(&dim) || lengths.len() != dim {
            return Err(Error::InvalidInput(format!(
                "grid needs 1 or 2 axes with matching lengths, got {} cells / {} lengths",
                cells.len(),
                lengths.len()
            )));
        }
        for (axis, (&n, &l)) in cells.iter().zip(lengths).enumerate() {
            if n < 2 {
                return Err(Error::InvalidInput(format!("axis {axis}: need at least 2 cells, got {n}")));
            }
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidInput(format!("axis {axis}: length must be positive, got {l}")));
            }
        }
        let mut c = [1usize; 2];
        let mut len = [1.0; 2];
        c[..dim].copy_from_slice(cells);
        len[..dim].copy_from_slice(lengths);
        Ok(Self { dim, cells: c, lengths: len })
    }

    pub fn new_1d(cells: usize, length: f64) -> Result<Self> {
        Self::new(&[cells], &[length])
    }

    pub fn new_2d(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        Self::new(&[nx, ny], &[lx, ly])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells[..self.dim]
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths[..self.dim]
    }

    pub fn nx(&self) -> usize {
        self.cells[0]
    }

    /// 1 for one-dimensional grids.
    pub fn ny(&self) -> usize {
        self.cells[1]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.cells[axis] as f64
    }

    pub fn cell_count(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).product()
    }

    pub fn domain_volume(&self) -> f64 {
        self.lengths().iter().product()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.cells[0] * j
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.cells[0], idx / self.cells[0])
    }

    /// Cell-centre position; the second component is 0 in 1D.
    pub fn center(&self, idx: usize) -> [f64; 2] {
        let (i, j) = self.coords(idx);
        let y = if self.dim == 2 { (j as f64 + 0.5) * self.spacing(1) } else { 0.0 };
        [(i as f64 + 0.5) * self.spacing(0), y]
    }

    /// Number of interior faces normal to `axis`.
    pub fn face_count(&self, axis: usize) -> usize {
        match (axis, self.dim) {
            (0, _) => (self.cells[0] - 1) * self.cells[1],
            (1, 2) => self.cells[0] * (self.cells[1] - 1),
            _ => 0,
        }
    }

    /// Half-bandwidth of nearest-neighbour operators in row-major order.
    pub fn bandwidth(&self) -> usize {
        if self.dim == 2 { self.cells[0] } else { 1 }
    }

    /// Calls `f(face, left_cell, right_cell)` for every interior face on `axis`.
    fn for_each_face(&self, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (nx, ny) = (self.cells[0], self.cells[1]);
        match axis {
            0 => {
                for j in 0..ny {
                    for i in 0..nx - 1 {
                        f(i + (nx - 1) * j, self.index(i, j), self.index(i + 1, j));
                    }
                }
            }
            1 if self.dim == 2 => {
                for j in 0..ny - 1 {
                    for i in 0..nx {
                        f(i + nx * j, self.index(i, j), self.index(i, j + 1));
                    }
                }
            }
            _ => {}
        }
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Cell-centred samples of a scalar function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cell_count() {
            return Err(Error::InvalidInput(format!(
                "field has {} values, grid has {} cells",
                values.len(),
                grid.cell_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericFailure(format!("non-finite value at cell {i}")));
        }
        Ok(Self { grid, values })
    }

    /// Internal constructor for values known to have the right length.
    pub(crate) fn from_vec(grid: GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.cell_count());
        Self { grid, values }
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        Self::from_vec(grid, vec![c; grid.cell_count()])
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Samples `f` at cell centres (`[x, y]`, with `y = 0` in 1D).
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut([f64; 2]) -> f64) -> Self {
        Self::from_vec(grid, (0..grid.cell_count()).map(|i| f(grid.center(i))).collect())
    }

    pub fn grid(&self) -> &GridSpec {
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Field {
        Field::from_vec(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        debug_assert_eq!(self.grid, other.grid);
        Field::from_vec(
            self.grid,
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Midpoint quadrature `Σ values · cell volume`.
    pub fn integrate(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Discrete L² inner product.
    pub fn inner(&self, other: &Field) -> f64 {
        linalg::dot(&self.values, &other.values) * self.grid.cell_volume()
    }

    /// `L^p` norm; `p = f64::INFINITY` gives the max norm.
    pub fn norm(&self, p: f64) -> Result<f64> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::InvalidInput(format!("norm exponent must be >= 1, got {p}")));
        }
        if p.is_infinite() {
            return Ok(self.max_abs());
        }
        if p == 2.0 {
            return Ok(self.norm_sq().sqrt());
        }
        let s: f64 = self.values.iter().map(|v| v.abs().powf(p)).sum();
        Ok((s * self.grid.cell_volume()).powf(1.0 / p))
    }

    pub fn norm_sq(&self) -> f64 {
        self.inner(self)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl Add for &Field {
    type Output = Field;
    fn add(self, rhs: &Field) -> Field {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &Field {
    type Output = Field;
    fn sub(self, rhs: &Field) -> Field {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<f64> for &Field {
    type Output = Field;
    fn mul(self, rhs: f64) -> Field {
        self.map(|a| a * rhs)
    }
}

/// Values on interior faces, one vector per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceData {
    grid: GridSpec,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl FaceData {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            x: vec![0.0; grid.face_count(0)],
            y: vec![0.0; grid.face_count(1)],
        }
    }

    pub fn new(grid: GridSpec, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != grid.face_count(0) || y.len() != grid.face_count(1) {
            return Err(Error::InvalidInput(format!(
                "face data sizes ({}, {}) do not match grid ({}, {})",
                x.len(),
                y.len(),
                grid.face_count(0),
                grid.face_count(1)
            )));
        }
        Ok(Self { grid, x, y })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn axis(&self, axis: usize) -> &[f64] {
        if axis == 0 { &self.x } else { &self.y }
    }

    pub fn axis_mut(&mut self, axis: usize) -> &mut [f64] {
        if axis == 0 { &mut self.x } else { &mut self.y }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FaceData {
        FaceData {
            grid: self.grid,
            x: self.x.iter().map(|&v| f(v)).collect(),
            y: self.y.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &FaceData, f: impl Fn(f64, f64) -> f64) -> FaceData {
        FaceData {
            grid: self.grid,
            x: self.x.iter().zip(&other.x).map(|(&a, &b)| f(a, b)).collect(),
            y: self.y.iter().zip(&other.y).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `Σ_faces g² · cell volume`, the discrete `‖g‖²_{L²}`. Equals
    /// `⟨−Δ_h f, f⟩` when `g = grad_faces(f)`.
    pub fn norm_sq(&self) -> f64 {
        (linalg::dot(&self.x, &self.x) + linalg::dot(&self.y, &self.y)) * self.grid.cell_volume()
    }
}

pub fn integrate(f: &Field) -> f64 {
    f.integrate()
}

pub fn norm(f: &Field, p: f64) -> Result<f64> {
    f.norm(p)
}

pub fn grad_faces(f: &Field) -> FaceData {
    let grid = *f.grid();
    let mut out = FaceData::zeros(grid);
    for axis in 0..grid.dim() {
        let h = grid.spacing(axis);
        let v = f.values();
        let dst = out.axis_mut(axis);
        grid.for_each_face(axis, |face, l, r| dst[face] = (v[r] - v[l]) / h);
    }
    out
}

pub fn div_faces(g: &FaceData) -> Field {
    let grid = *g.grid();
    let mut out = vec![0.0; grid.cell_count()];
    for axis in 0..grid.dim() {
        let h = grid.spacing(axis);
        let src = g.axis(axis);
        grid.for_each_face(axis, |face, l, r| {
            out[l] += src[face] / h;
            out[r] -= src[face] / h;
        });
    }
    Field::from_vec(grid, out)
}

pub fn neumann_laplacian(f: &Field) -> Field {
    div_faces(&grad_faces(f))
}

/// Cell-centred `|∇f|²`: per axis, the mean of the squared gradients on the two
/// adjacent faces (a wall face contributes zero). Its integral equals the face
/// norm of `grad_faces(f)`, and `Δ_h(f²) = 2 f Δ_h f + 2 |∇f|²` holds exactly.
pub fn cell_grad_sq(f: &Field) -> Field {
    let grid = *f.grid();
    let g = grad_faces(f);
    let mut out = vec![0.0; grid.cell_count()];
    for axis in 0..grid.dim() {
        let src = g.axis(axis);
        grid.for_each_face(axis, |face, l, r| {
            let q = 0.5 * src[face] * src[face];
            out[l] += q;
            out[r] += q;
        });
    }
    Field::from_vec(grid, out)
}

/// Discrete `|D²f|²` per cell: squared second differences along each axis
/// (reflecting ghost cells) plus twice the squared mixed central difference.
pub fn hessian_sq(f: &Field) -> Field {
    let grid = *f.grid();
    let (nx, ny) = (grid.nx(), grid.ny());
    let v = f.values();
    let at = |i: isize, j: isize| {
        let ri = i.clamp(0, nx as isize - 1) as usize;
        let rj = j.clamp(0, ny as isize - 1) as usize;
        v[grid.index(ri, rj)]
    };
    let hx = grid.spacing(0);
    let mut out = vec![0.0; grid.cell_count()];
    for (idx, o) in out.iter_mut().enumerate() {
        let (i, j) = grid.coords(idx);
        let (i, j) = (i as isize, j as isize);
        let c = at(i, j);
        let fxx = (at(i + 1, j) - 2.0 * c + at(i - 1, j)) / (hx * hx);
        let mut s = fxx * fxx;
        if grid.dim() == 2 {
            let hy = grid.spacing(1);
            let fyy = (at(i, j + 1) - 2.0 * c + at(i, j - 1)) / (hy * hy);
            let fxy = (at(i + 1, j + 1) - at(i + 1, j - 1) - at(i - 1, j + 1) + at(i - 1, j - 1))
                / (4.0 * hx * hy);
            s += fyy * fyy + 2.0 * fxy * fxy;
        }
        *o = s;
    }
    Field::from_vec(grid, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FluxScheme {
    /// Arithmetic mean of the adjacent cell values.
    #[default]
    Central,
    /// Donor-cell value chosen by the sign of the face velocity.
    Upwind,
}

/// Face reconstruction of `c` times `velocity`: the advective flux `c ∇φ`.
pub fn advective_flux(c: &Field, velocity: &FaceData, scheme: FluxScheme) -> FaceData {
    let grid = *c.grid();
    let mut out = FaceData::zeros(grid);
    let v = c.values();
    for axis in 0..grid.dim() {
        let vel = velocity.axis(axis);
        let dst = out.axis_mut(axis);
        grid.for_each_face(axis, |face, l, r| {
            let w = vel[face];
            let cf = match scheme {
                FluxScheme::Central => 0.5 * (v[l] + v[r]),
                FluxScheme::Upwind => {
                    if w > 0.0 { v[l] } else { v[r] }
                }
            };
            dst[face] = cf * w;
        });
    }
    out
}

/// Cell values reconstructed on faces the same way [`advective_flux`] does.
pub fn face_values(c: &Field, velocity: &FaceData, scheme: FluxScheme) -> FaceData {
    let grid = *c.grid();
    let mut out = FaceData::zeros(grid);
    let v = c.values();
    for axis in 0..grid.dim() {
        let vel = velocity.axis(axis);
        let dst = out.axis_mut(axis);
        grid.for_each_face(axis, |face, l, r| {
            dst[face] = match scheme {
                FluxScheme::Central => 0.5 * (v[l] + v[r]),
                FluxScheme::Upwind => {
                    if vel[face] > 0.0 { v[l] } else { v[r] }
                }
            };
        });
    }
    out
}

/// Matrix of `f ↦ −Δ_h f`.
pub fn neg_laplacian_matrix(grid: &GridSpec) -> BandMatrix {
    let mut m = BandMatrix::zeros(grid.cell_count(), grid.bandwidth());
    for axis in 0..grid.dim() {
        let c = 1.0 / (grid.spacing(axis) * grid.spacing(axis));
        grid.for_each_face(axis, |_, l, r| {
            m.add(l, l, c);
            m.add(r, r, c);
            m.add(l, r, -c);
            m.add(r, l, -c);
        });
    }
    m
}

/// Matrix of `c ↦ div_faces(recon(weight ⊙ c) · velocity)`. Columns sum to
/// zero; with `Upwind` all off-diagonal entries are nonpositive.
pub fn advection_matrix(
    grid: &GridSpec,
    velocity: &FaceData,
    weight: Option<&[f64]>,
    scheme: FluxScheme,
) -> BandMatrix {
    let mut m = BandMatrix::zeros(grid.cell_count(), grid.bandwidth());
    let wt = |i: usize| weight.map_or(1.0, |w| w[i]);
    for axis in 0..grid.dim() {
        let h = grid.spacing(axis);
        let vel = velocity.axis(axis);
        grid.for_each_face(axis, |face, l, r| {
            let w = vel[face] / h;
            let (cl, cr) = match scheme {
                FluxScheme::Central => (0.5 * wt(l), 0.5 * wt(r)),
                FluxScheme::Upwind => {
                    if vel[face] > 0.0 { (wt(l), 0.0) } else { (0.0, wt(r)) }
                }
            };
            // flux leaves l, enters r
            m.add(l, l, cl * w);
            m.add(l, r, cr * w);
            m.add(r, l, -cl * w);
            m.add(r, r, -cr * w);
        });
    }
    m
}

/// Matrix of `φ ↦ div_faces(d · grad_faces(φ))`.
pub fn face_diffusion_matrix(grid: &GridSpec, d: &FaceData) -> BandMatrix {
    let mut m = BandMatrix::zeros(grid.cell_count(), grid.bandwidth());
    for axis in 0..grid.dim() {
        let h = grid.spacing(axis);
        let dv = d.axis(axis);
        grid.for_each_face(axis, |face, l, r| {
            let c = dv[face] / (h * h);
            m.add(l, r, c);
            m.add(l, l, -c);
            m.add(r, l, c);
            m.add(r, r, -c);
        });
    }
    m
}

/// Solves `(I − Δ_h) z = rhs` with homogeneous Neumann conditions.
///
/// 1D uses tridiagonal elimination; 2D uses conjugate gradients with relative
/// residual tolerance `1e-10`.
pub fn poisson_neumann_solve(rhs: &Field) -> Result<Field> {
    const TOL: f64 = 1e-10;
    let grid = *rhs.grid();
    let mut a = neg_laplacian_matrix(&grid);
    a.add_diagonal(&vec![1.0; grid.cell_count()]);
    let z = if grid.dim() == 1 {
        a.clone().solve(rhs.values())?
    } else {
        linalg::conjugate_gradient(|x| a.matvec(x), rhs.values(), TOL, 20 * grid.cell_count())?
    };
    let az = a.matvec(&z);
    let res: Vec<f64> = az.iter().zip(rhs.values()).map(|(p, q)| p - q).collect();
    let bn = linalg::norm2(rhs.values());
    let rel = if bn == 0.0 { linalg::norm2(&res) } else { linalg::norm2(&res) / bn };
    if !(rel <= TOL) {
        return Err(Error::LinearSolver {
            reason: "Poisson-Neumann residual above tolerance".into(),
            residual: rel,
        });
    }
    Ok(Field::from_vec(grid, z))
}

/// Writes a field as CSV: a `# grid` metadata comment, a header row, then one
/// row per cell (`i[,j],value`).
pub fn write_field_csv<W: Write>(field: &Field, mut out: W) -> Result<()> {
    let g = field.grid();
    writeln!(
        out,
        "# grid dim={} cells={} lengths={}",
        g.dim(),
        join(g.cells().iter().map(|c| c.to_string())),
        join(g.lengths().iter().map(|l| format!("{l:?}")))
    )?;
    let mut w = csv::Writer::from_writer(out);
    if g.dim() == 1 {
        w.write_record(["i", "value"])?;
    } else {
        w.write_record(["i", "j", "value"])?;
    }
    for (idx, v) in field.values().iter().enumerate() {
        let (i, j) = g.coords(idx);
        if g.dim() == 1 {
            w.write_record([i.to_string(), format!("{v:?}")])?;
        } else {
            w.write_record([i.to_string(), j.to_string(), format!("{v:?}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn join(it: impl Iterator<Item = String>) -> String {
    it.collect::<Vec<_>>().join(";")
}

/// Reads the format written by [`write_field_csv`].
pub fn read_field_csv<R: BufRead>(mut input: R) -> Result<Field> {
    let mut first = String::new();
    input.read_line(&mut first)?;
    let meta = first
        .trim()
        .strip_prefix("# grid")
        .ok_or_else(|| Error::InvalidInput("missing '# grid' header line".into()))?;
    let mut cells = Vec::new();
    let mut lengths = Vec::new();
    for kv in meta.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("bad grid metadata '{kv}'")))?;
        let bad = |_| Error::InvalidInput(format!("bad grid metadata '{kv}'"));
        match k {
            "cells" => {
                cells = v.split(';').map(|s| s.parse::<usize>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(e.to_string()))?
            }
            "lengths" => {
                lengths = v.split(';').map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(e.to_string()))?
            }
            _ => {}
        }
    }
    let grid = GridSpec::new(&cells, &lengths)?;
    let mut values = vec![f64::NAN; grid.cell_count()];
    let mut rdr = csv::Reader::from_reader(input);
    for rec in rdr.records() {
        let rec = rec?;
        let parse_idx = |s: &str| {
            s.trim().parse::<usize>().map_err(|e| Error::InvalidInput(format!("bad index '{s}': {e}")))
        };
        let (i, j, v) = if grid.dim() == 1 {
            (parse_idx(&rec[0])?, 0, &rec[1])
        } else {
            (parse_idx(&rec[0])?, parse_idx(&rec[1])?, &rec[2])
        };
        if i >= grid.nx() || j >= grid.ny() {
            return Err(Error::InvalidInput(format!("cell ({i},{j}) outside grid")));
        }
        values[grid.index(i, j)] = v
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::InvalidInput(format!("bad value '{v}': {e}")))?;
    }
    Field::new(grid, values)
}

pub fn field_to_json(field: &Field) -> Result<String> {
    Ok(serde_json::to_string(field)?)
}

pub fn field_from_json(s: &str) -> Result<Field> {
    let f: Field = serde_json::from_str(s)?;
    Field::new(f.grid, f.values)
}
