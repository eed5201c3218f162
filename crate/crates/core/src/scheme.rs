//! Truncated time-discrete scheme in the variables `(u, z)`, `z = √(v + α²)`:
//!
//! ```text
//! (uⁿ − uⁿ⁻¹)/k − Δuⁿ + ∇·(Tᵐ(uⁿ) ∇(zⁿ)²) = 0
//! (zⁿ − zⁿ⁻¹)/k − |∇zⁿ|²/zⁿ − Δzⁿ = −½ Tᵐ(uⁿ)ˢ (zⁿ − α²/zⁿ)
//! ```
//!
//! with `Tᵐ(r) = min(r, m)` and `vⁿ` recovered either as `(zⁿ)² − α²` or from
//! a linear consumption step driven by `uⁿ`. Each step is solved by Picard
//! iteration: a linear `u`-solve with the velocity `∇(z²)` and the
//! truncation ratio `Tᵐ(u)/u` frozen, then a linear solve for `w = z − α`
//! with the gradient source and the factor `(z + α)/z` of the reaction
//! frozen. Both matrices are M-matrices for upwind fluxes (and for central
//! fluxes at moderate cell Péclet numbers), so every iterate keeps `u ≥ 0`
//! and `z ≥ α`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    advection_matrix, advective_flux, cell_grad_sq, div_faces, grad_faces, neg_laplacian_matrix,
    neumann_laplacian, Field, FluxScheme, GridSpec,
};
use crate::linalg::BandMatrix;
use crate::model::{consumption, tm_cap, ModelParams};

/// Tolerance used for the post-hoc pointwise bound checks.
pub const BOUND_TOL: f64 = 1e-8;

/// How `vⁿ` is recovered after the `(u, z)` step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VVariant {
    /// `vⁿ = (zⁿ)² − α²`.
    #[default]
    FromZ,
    /// `(vⁿ − vⁿ⁻¹)/k − Δvⁿ + Tᵐ(uⁿ)ˢ vⁿ = 0`.
    FromU,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeParams {
    pub k: f64,
    pub model: ModelParams,
    #[serde(default)]
    pub v_variant: VVariant,
    #[serde(default)]
    pub flux_scheme: FluxScheme,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_picard_max")]
    pub picard_max: usize,
    pub t_final: f64,
}

fn default_picard_tol() -> f64 {
    1e-9
}

fn default_picard_max() -> usize {
    200
}

impl SchemeParams {
    pub fn new(k: f64, t_final: f64, model: ModelParams) -> Self {
        Self {
            k,
            model,
            v_variant: VVariant::default(),
            flux_scheme: FluxScheme::default(),
            picard_tol: default_picard_tol(),
            picard_max: default_picard_max(),
            t_final,
        }
    }

    pub fn with_variant(mut self, v: VVariant) -> Self {
        self.v_variant = v;
        self
    }

    pub fn with_flux(mut self, f: FluxScheme) -> Self {
        self.flux_scheme = f;
        self
    }

    pub fn with_k(mut self, k: f64) -> Self {
        self.k = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidInput(format!("k must be positive, got {}", self.k)));
        }
        if !(self.picard_tol > 0.0) {
            return Err(Error::InvalidInput("picard_tol must be positive".into()));
        }
        if self.picard_max == 0 {
            return Err(Error::InvalidInput("picard_max must be at least 1".into()));
        }
        if !(self.t_final >= self.k * (1.0 - 1e-12)) {
            return Err(Error::InvalidInput(format!(
                "t_final = {} must be at least k = {}",
                self.t_final, self.k
            )));
        }
        Ok(())
    }

    /// Number of steps `⌈T/k⌉` (a ratio within 1e-9 of an integer counts as that integer).
    pub fn step_count(&self) -> usize {
        ((self.t_final / self.k) - 1e-9).ceil().max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeStep {
    pub n: usize,
    pub u: Field,
    pub z: Field,
    pub v: Field,
    pub picard_iters: usize,
    pub picard_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub params: SchemeParams,
    pub grid: GridSpec,
    pub steps: Vec<TimeStep>,
}

impl Trajectory {
    /// Number of accepted steps after the initial state.
    pub fn step_count(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.params.k
    }

    pub fn final_time(&self) -> f64 {
        self.time(self.step_count())
    }

    pub fn initial(&self) -> &TimeStep {
        &self.steps[0]
    }

    pub fn last(&self) -> &TimeStep {
        self.steps.last().expect("trajectory holds at least the initial state")
    }
}

fn check_nonnegative(f: &Field, what: &str) -> Result<()> {
    if !f.all_finite() {
        return Err(Error::InvalidInput(format!("{what} has non-finite entries")));
    }
    if let Some((i, v)) = f.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::InvalidInput(format!("{what} is negative at cell {i} ({v})")));
    }
    Ok(())
}

/// Step 0: `z⁰ = √(v⁰ + α²)`.
pub fn initialize(u0: &Field, v0: &Field, params: &SchemeParams) -> Result<TimeStep> {
    params.validate()?;
    u0.grid().ensure_same(v0.grid())?;
    check_nonnegative(u0, "u0")?;
    check_nonnegative(v0, "v0")?;
    let a2 = params.model.alpha * params.model.alpha;
    Ok(TimeStep {
        n: 0,
        u: u0.clone(),
        z: v0.map(|v| (v + a2).sqrt()),
        v: v0.clone(),
        picard_iters: 0,
        picard_residual: 0.0,
    })
}

/// `vⁿ = (zⁿ)² − α²`.
pub fn v_update_from_z(z_n: &Field, alpha: f64) -> Field {
    z_n.map(|z| (z - alpha) * (z + alpha))
}

/// Solves `(I/k − Δ_h + Tᵐ(uⁿ)ˢ) vⁿ = vⁿ⁻¹/k`.
pub fn v_update_from_u(v_prev: &Field, u_n: &Field, params: &SchemeParams) -> Result<Field> {
    v_prev.grid().ensure_same(u_n.grid())?;
    let grid = *v_prev.grid();
    let lap = neg_laplacian_matrix(&grid);
    consumption_step(&lap, v_prev, u_n, params)
}

fn consumption_step(neg_lap: &BandMatrix, v_prev: &Field, u_n: &Field, p: &SchemeParams) -> Result<Field> {
    let grid = *v_prev.grid();
    let (m, s, k) = (p.model.m, p.model.s, p.k);
    let mut a = neg_lap.clone();
    let diag: Vec<f64> = u_n.values().iter().map(|&u| 1.0 / k + consumption(u, m, s)).collect();
    a.add_diagonal(&diag);
    let rhs: Vec<f64> = v_prev.values().iter().map(|v| v / k).collect();
    Ok(Field::from_vec(grid, a.solve(&rhs)?))
}

/// Residuals of both step equations at `(u, z)`, scaled by `k` and by the
/// size of the previous state; the Picard stopping quantity.
pub fn step_residual(u: &Field, z: &Field, prev: &TimeStep, params: &SchemeParams) -> f64 {
    let p = params;
    let (k, m, s, a) = (p.k, p.model.m, p.model.s, p.model.alpha);
    let cu = u.map(|x| tm_cap(x, m));
    let vel = grad_faces(&z.map(|x| x * x));
    let div = div_faces(&advective_flux(&cu, &vel, p.flux_scheme));
    let lap_u = neumann_laplacian(u);
    let mut ru = 0.0_f64;
    for i in 0..u.len() {
        let r = (u.values()[i] - prev.u.values()[i]) / k - lap_u.values()[i] + div.values()[i];
        ru = ru.max(r.abs());
    }
    let g = cell_grad_sq(z);
    let lap_z = neumann_laplacian(z);
    let mut rz = 0.0_f64;
    for i in 0..z.len() {
        let zi = z.values()[i];
        let c = consumption(u.values()[i], m, s);
        let r = (zi - prev.z.values()[i]) / k - g.values()[i] / zi - lap_z.values()[i]
            + 0.5 * c * (zi - a * a / zi);
        rz = rz.max(r.abs());
    }
    let scale_u = prev.u.max_abs().max(u.max_abs());
    let rel_u = if ru == 0.0 { 0.0 } else { k * ru / scale_u.max(f64::MIN_POSITIVE) };
    let rel_z = k * rz / prev.z.max_abs();
    rel_u.max(rel_z)
}

/// Reusable per-grid state for stepping.
struct Stepper {
    neg_lap: BandMatrix,
}

impl Stepper {
    fn new(grid: &GridSpec) -> Self {
        Self { neg_lap: neg_laplacian_matrix(grid) }
    }

    fn solve_u(&self, prev: &TimeStep, u_it: &Field, z_it: &Field, p: &SchemeParams) -> Result<Field> {
        let grid = *prev.u.grid();
        let m = p.model.m;
        let theta: Vec<f64> = u_it.values().iter().map(|&u| if u > m { m / u } else { 1.0 }).collect();
        let vel = grad_faces(&z_it.map(|x| x * x));
        let mut a = advection_matrix(&grid, &vel, Some(&theta), p.flux_scheme);
        a.axpy(1.0, &self.neg_lap);
        a.add_diagonal(&vec![1.0 / p.k; grid.cell_count()]);
        let rhs: Vec<f64> = prev.u.values().iter().map(|u| u / p.k).collect();
        Ok(Field::from_vec(grid, a.solve(&rhs)?))
    }

    fn solve_z(&self, prev: &TimeStep, u_new: &Field, z_it: &Field, p: &SchemeParams) -> Result<Field> {
        let grid = *prev.z.grid();
        let (k, m, s, a) = (p.k, p.model.m, p.model.s, p.model.alpha);
        let g = cell_grad_sq(z_it);
        let mut mat = self.neg_lap.clone();
        let mut diag = Vec::with_capacity(grid.cell_count());
        let mut rhs = Vec::with_capacity(grid.cell_count());
        for i in 0..grid.cell_count() {
            let zi = z_it.values()[i];
            let c = consumption(u_new.values()[i], m, s);
            diag.push(1.0 / k + 0.5 * c * (1.0 + a / zi));
            rhs.push((prev.z.values()[i] - a) / k + g.values()[i] / zi);
        }
        mat.add_diagonal(&diag);
        let w = mat.solve(&rhs)?;
        Ok(Field::from_vec(grid, w.into_iter().map(|w| w + a).collect()))
    }

    fn step(&self, prev: &TimeStep, p: &SchemeParams) -> Result<TimeStep> {
        let n = prev.n + 1;
        let mut u_it = prev.u.clone();
        let mut z_it = prev.z.clone();
        let mut history = Vec::new();
        for iter in 1..=p.picard_max {
            let u_new = self.solve_u(prev, &u_it, &z_it, p)?;
            let z_new = self.solve_z(prev, &u_new, &z_it, p)?;
            if !u_new.all_finite() || !z_new.all_finite() {
                return Err(Error::NumericFailure(format!("non-finite iterate at step {n}")));
            }
            let res = step_residual(&u_new, &z_new, prev, p);
            history.push(res);
            u_it = u_new;
            z_it = z_new;
            if res < p.picard_tol {
                let v = match p.v_variant {
                    VVariant::FromZ => v_update_from_z(&z_it, p.model.alpha),
                    VVariant::FromU => consumption_step(&self.neg_lap, &prev.v, &u_it, p)?,
                };
                let out = TimeStep { n, u: u_it, z: z_it, v, picard_iters: iter, picard_residual: res };
                check_bounds(prev, &out, p)?;
                return Ok(out);
            }
            if !res.is_finite() {
                return Err(Error::NumericFailure(format!("non-finite residual at step {n}")));
            }
        }
        Err(Error::NonConvergence { step: n, iterations: p.picard_max, history })
    }
}

fn check_bounds(prev: &TimeStep, next: &TimeStep, p: &SchemeParams) -> Result<()> {
    let fail = |detail: String| Err(Error::BoundViolation { step: next.n, detail });
    let umin = next.u.min();
    if umin < -BOUND_TOL {
        return fail(format!("min u = {umin:e}"));
    }
    let (zmin, zmax, zcap) = (next.z.min(), next.z.max(), prev.z.max());
    if zmin < p.model.alpha - BOUND_TOL {
        return fail(format!("min z = {zmin} below alpha = {}", p.model.alpha));
    }
    if zmax > zcap + BOUND_TOL {
        return fail(format!("max z = {zmax} above previous max {zcap}"));
    }
    let (vmin, vmax, vcap) = (next.v.min(), next.v.max(), prev.v.max());
    if vmin < -BOUND_TOL {
        return fail(format!("min v = {vmin:e}"));
    }
    if vmax > vcap + BOUND_TOL {
        return fail(format!("max v = {vmax} above previous max {vcap}"));
    }
    Ok(())
}

/// One step of the scheme from `prev`.
pub fn step(prev: &TimeStep, params: &SchemeParams) -> Result<TimeStep> {
    params.validate()?;
    Stepper::new(prev.u.grid()).step(prev, params)
}

/// Runs `⌈T/k⌉` steps. On failure returns the accepted prefix and the error.
pub fn run_partial(u0: &Field, v0: &Field, params: &SchemeParams) -> (Option<Trajectory>, Option<Error>) {
    let first = match initialize(u0, v0, params) {
        Ok(s) => s,
        Err(e) => return (None, Some(e)),
    };
    let grid = *u0.grid();
    let stepper = Stepper::new(&grid);
    let mut traj = Trajectory { params: *params, grid, steps: vec![first] };
    for _ in 0..params.step_count() {
        match stepper.step(traj.last(), params) {
            Ok(s) => traj.steps.push(s),
            Err(e) => return (Some(traj), Some(e)),
        }
    }
    (Some(traj), None)
}

pub fn run(u0: &Field, v0: &Field, params: &SchemeParams) -> Result<Trajectory> {
    match run_partial(u0, v0, params) {
        (Some(t), None) => Ok(t),
        (_, Some(e)) => Err(e),
        (None, None) => unreachable!(),
    }
}

fn step_index_pc(traj: &Trajectory, t: f64) -> Result<usize> {
    let n_max = traj.step_count();
    let k = traj.params.k;
    if !(t >= -1e-12 && t <= n_max as f64 * k * (1.0 + 1e-12) + 1e-12) {
        return Err(Error::Domain(format!("t = {t} outside [0, {}]", n_max as f64 * k)));
    }
    Ok(((t / k - 1e-9).ceil().max(0.0) as usize).min(n_max))
}

/// Piecewise-constant interpolant: step `n` on `(t_{n−1}, t_n]`, step 0 at `t = 0`.
pub fn interpolant_pc(traj: &Trajectory, t: f64) -> Result<(Field, Field)> {
    let n = step_index_pc(traj, t)?;
    let s = &traj.steps[n];
    Ok((s.u.clone(), s.z.clone()))
}

/// Piecewise-linear interpolant `uⁿ + (t − t_n)/k (uⁿ − uⁿ⁻¹)` on `[t_{n−1}, t_n]`.
pub fn interpolant_lin(traj: &Trajectory, t: f64) -> Result<(Field, Field)> {
    let n = step_index_pc(traj, t)?;
    if n == 0 {
        let s = &traj.steps[0];
        return Ok((s.u.clone(), s.z.clone()));
    }
    let (a, b) = (&traj.steps[n - 1], &traj.steps[n]);
    let th = (t - traj.time(n)) / traj.params.k;
    let lerp = |x: &Field, y: &Field| y.zip_map(x, |yn, xp| yn + th * (yn - xp));
    Ok((lerp(&a.u, &b.u), lerp(&a.z, &b.z)))
}

/// Max-norm residual of `δt z · 2zⁿ − δt (z²) − (zⁿ − zⁿ⁻¹)²/k`, which vanishes
/// identically for the quadratic `F(z) = z²`.
pub fn eyre_identity_check(z_n: &Field, z_prev: &Field, k: f64) -> f64 {
    z_n.values()
        .iter()
        .zip(z_prev.values())
        .map(|(&z, &zp)| {
            let d = z - zp;
            let num = 2.0 * z * d - (z * z - zp * zp) - d * d;
            (num / k).abs()
        })
        .fold(0.0, f64::max)
}
