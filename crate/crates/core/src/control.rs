//! Bilinear optimal control of `∂t v − Δv = −uˢv + f v 1_Ωc`.
//!
//! The forward model is the linearly-implicit scheme
//!
//! ```text
//! (uⁿ − uⁿ⁻¹)/k − Δuⁿ + ∇·(uⁿ ∇vⁿ⁻¹) = 0
//! (vⁿ − vⁿ⁻¹)/k − Δvⁿ + Tᵐ(uⁿ)ˢ vⁿ − fⁿ vⁿ 1_Ωc = 0
//! ```
//!
//! and everything else is its exact discrete derivative: the tangent system
//! is an instance of [`LinearizedCoeffs`], the adjoint is the transpose of
//! that system, and the gradient of the discrete cost is
//! `1_Ωc (γ_f sgn(f)|f|^{q−1} + v η)`.
//!
//! Index conventions: controls and sources are step-indexed (`N` fields,
//! entry `n − 1` acts on `(t_{n−1}, t_n]`); states, targets and adjoints are
//! time-indexed (`N + 1` fields). Adjoint entry `j < N` holds the multiplier
//! of step `j + 1`, a backward-Euler march from the terminal value
//! `λ(T) = η(T) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    advection_matrix, face_diffusion_matrix, face_values, grad_faces, neg_laplacian_matrix, FaceData,
    Field, FluxScheme, GridSpec,
};
use crate::linalg::{BandLu, BandMatrix};
use crate::model::{consumption, consumption_derivative, ModelParams};
use crate::scheme::{SchemeParams, TimeStep, Trajectory, VVariant};

/// Exponent of the density tracking term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingExponent {
    /// `s·q`.
    #[default]
    Strong,
    /// `5s/3`.
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProblem {
    pub grid: GridSpec,
    /// 1 on the control region, 0 elsewhere.
    pub mask: Field,
    pub gamma_u: f64,
    pub gamma_v: f64,
    pub gamma_f: f64,
    pub q: f64,
    #[serde(default)]
    pub tracking: TrackingExponent,
    /// Consumption power, truncation level and the shift used for `z`.
    pub model: ModelParams,
    #[serde(default)]
    pub flux_scheme: FluxScheme,
    pub k: f64,
    pub t_final: f64,
    pub lower: f64,
    pub upper: f64,
    pub u0: Field,
    pub v0: Field,
    /// Time-indexed targets (`N + 1` fields; entry 0 is not used).
    pub u_d: Vec<Field>,
    pub v_d: Vec<Field>,
}

pub type Control = Vec<Field>;

impl ControlProblem {
    pub fn step_count(&self) -> usize {
        self.scheme_params().step_count()
    }

    pub fn scheme_params(&self) -> SchemeParams {
        SchemeParams::new(self.k, self.t_final, self.model).with_flux(self.flux_scheme)
    }

    pub fn tracking_power(&self) -> f64 {
        match self.tracking {
            TrackingExponent::Strong => self.model.s * self.q,
            TrackingExponent::Weak => 5.0 * self.model.s / 3.0,
        }
    }

    /// Structural checks needed by every operation.
    pub fn check_shapes(&self) -> Result<()> {
        for f in [&self.mask, &self.u0, &self.v0] {
            self.grid.ensure_same(f.grid())?;
        }
        let n = self.step_count() + 1;
        if self.u_d.len() != n || self.v_d.len() != n {
            return Err(Error::GridMismatch(format!(
                "targets need {n} time levels, got {} and {}",
                self.u_d.len(),
                self.v_d.len()
            )));
        }
        for f in self.u_d.iter().chain(&self.v_d) {
            self.grid.ensure_same(f.grid())?;
        }
        Ok(())
    }

    /// Full validation: shapes, a 0/1 mask, `q ≥ 2`, `γ_u > 0` and
    /// (`γ_f > 0` or a bounded box).
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        self.scheme_params().validate()?;
        if self.mask.values().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidInput("mask must contain only 0 and 1".into()));
        }
        if !(self.q >= 2.0) {
            return Err(Error::InvalidInput(format!("q must be >= 2, got {}", self.q)));
        }
        if !(self.gamma_u > 0.0) || self.gamma_v < 0.0 || self.gamma_f < 0.0 {
            return Err(Error::InvalidInput("need gamma_u > 0 and nonnegative gamma_v, gamma_f".into()));
        }
        if !(self.gamma_f > 0.0 || (self.lower.is_finite() && self.upper.is_finite())) {
            return Err(Error::InvalidInput("need gamma_f > 0 or a bounded box".into()));
        }
        if !(self.lower <= self.upper) {
            return Err(Error::InvalidInput("box lower bound exceeds upper bound".into()));
        }
        Ok(())
    }

    pub fn zero_control(&self) -> Control {
        vec![Field::zeros(self.grid); self.step_count()]
    }

    /// Constant control `c` on the control region.
    pub fn constant_control(&self, c: f64) -> Control {
        vec![self.mask.map(|m| m * c); self.step_count()]
    }

    /// Projection onto the box, zero off the control region.
    pub fn project(&self, f: &Control) -> Control {
        f.iter()
            .map(|fi| fi.zip_map(&self.mask, |x, m| if m == 0.0 { 0.0 } else { x.clamp(self.lower, self.upper) }))
            .collect()
    }

    fn check_control(&self, f: &Control) -> Result<()> {
        if f.len() != self.step_count() {
            return Err(Error::GridMismatch(format!(
                "control needs {} steps, got {}",
                self.step_count(),
                f.len()
            )));
        }
        for fi in f {
            self.grid.ensure_same(fi.grid())?;
        }
        Ok(())
    }
}

/// `Σₙ k ⟨aⁿ, bⁿ⟩` over step-indexed series.
pub fn space_time_inner(a: &[Field], b: &[Field], k: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| k * x.inner(y)).sum()
}

fn z_of(v: &Field, alpha: f64) -> Field {
    v.map(|x| (x.max(0.0) + alpha * alpha).sqrt())
}

fn solve_with(mat: BandMatrix, rhs: &[f64], grid: GridSpec) -> Result<Field> {
    Field::new(grid, mat.solve(rhs)?)
}

fn u_matrix(neg_lap: &BandMatrix, v_prev: &Field, flux: FluxScheme, k: f64) -> BandMatrix {
    let grid = *v_prev.grid();
    let mut a = advection_matrix(&grid, &grad_faces(v_prev), None, flux);
    a.axpy(1.0, neg_lap);
    a.add_diagonal(&vec![1.0 / k; grid.cell_count()]);
    a
}

fn v_matrix(neg_lap: &BandMatrix, reaction: &[f64], k: f64) -> BandMatrix {
    let mut a = neg_lap.clone();
    a.add_diagonal(&reaction.iter().map(|r| 1.0 / k + r).collect::<Vec<_>>());
    a
}

fn stability_guard(problem: &ControlProblem, f: &Control) -> Result<()> {
    let fmax = f
        .iter()
        .flat_map(|fi| fi.values().iter().zip(problem.mask.values()).map(|(x, m)| x * m))
        .fold(0.0_f64, f64::max);
    let product = problem.k * fmax;
    if product >= 1.0 {
        return Err(Error::Stability { product, suggested_k: 1.0 / fmax });
    }
    Ok(())
}

fn linearly_implicit(
    u0: &Field,
    v0: &Field,
    params: &SchemeParams,
    mask: Option<(&Field, &Control)>,
) -> Result<Trajectory> {
    params.validate()?;
    u0.grid().ensure_same(v0.grid())?;
    let grid = *u0.grid();
    let (k, m, s, a) = (params.k, params.model.m, params.model.s, params.model.alpha);
    let neg_lap = neg_laplacian_matrix(&grid);
    let first = crate::scheme::initialize(u0, v0, params)?;
    let mut steps = vec![first];
    for n in 1..=params.step_count() {
        let prev = steps.last().expect("nonempty");
        let au = u_matrix(&neg_lap, &prev.v, params.flux_scheme, k);
        let u = solve_with(au, &prev.u.values().iter().map(|x| x / k).collect::<Vec<_>>(), grid)?;
        let reaction: Vec<f64> = (0..grid.cell_count())
            .map(|i| {
                let ctl = mask.map_or(0.0, |(msk, f)| msk.values()[i] * f[n - 1].values()[i]);
                consumption(u.values()[i], m, s) - ctl
            })
            .collect();
        let av = v_matrix(&neg_lap, &reaction, k);
        let v = solve_with(av, &prev.v.values().iter().map(|x| x / k).collect::<Vec<_>>(), grid)?;
        if !u.all_finite() || !v.all_finite() {
            return Err(Error::NumericFailure(format!("non-finite state at step {n}")));
        }
        let z = z_of(&v, a);
        steps.push(TimeStep { n, u, z, v, picard_iters: 1, picard_residual: 0.0 });
    }
    let mut p = *params;
    p.v_variant = VVariant::FromU;
    Ok(Trajectory { params: p, grid, steps })
}

/// Uncontrolled linearly-implicit solve (coefficients frozen at the
/// previous step); the reference the controlled solver reduces to at `f = 0`.
pub fn linearly_implicit_run(u0: &Field, v0: &Field, params: &SchemeParams) -> Result<Trajectory> {
    linearly_implicit(u0, v0, params, None)
}

pub fn state_solve_controlled(u0: &Field, v0: &Field, f: &Control, problem: &ControlProblem) -> Result<Trajectory> {
    problem.check_control(f)?;
    problem.grid.ensure_same(u0.grid())?;
    stability_guard(problem, f)?;
    linearly_implicit(u0, v0, &problem.scheme_params(), Some((&problem.mask, f)))
}

fn signed_pow(x: f64, p: f64) -> f64 {
    if x == 0.0 { 0.0 } else { x.signum() * x.abs().powf(p) }
}

pub fn cost_j(traj: &Trajectory, f: &Control, problem: &ControlProblem) -> Result<f64> {
    problem.check_shapes()?;
    problem.check_control(f)?;
    if traj.steps.len() != problem.step_count() + 1 {
        return Err(Error::GridMismatch("trajectory and problem differ in step count".into()));
    }
    problem.grid.ensure_same(&traj.grid)?;
    let (k, pu, q) = (problem.k, problem.tracking_power(), problem.q);
    let vol = problem.grid.cell_volume();
    let mut total = 0.0;
    for n in 1..traj.steps.len() {
        let st = &traj.steps[n];
        let mut tu = 0.0;
        let mut tv = 0.0;
        let mut tf = 0.0;
        for i in 0..problem.grid.cell_count() {
            tu += (st.u.values()[i] - problem.u_d[n].values()[i]).abs().powf(pu);
            let dv = st.v.values()[i] - problem.v_d[n].values()[i];
            tv += dv * dv;
            tf += problem.mask.values()[i] * f[n - 1].values()[i].abs().powf(q);
        }
        total += k * vol * (problem.gamma_u / pu * tu + 0.5 * problem.gamma_v * tv + problem.gamma_f / q * tf);
    }
    Ok(total)
}

/// Coefficients of one step of the general linearized system
///
/// ```text
/// (Uⁿ − Uⁿ⁻¹)/k − ΔUⁿ + a₁Uⁿ + b₁Vⁿ⁻¹ + ∇·(Uⁿ c₁) + ∇·(d ∇Vⁿ⁻¹) = g_U
/// (Vⁿ − Vⁿ⁻¹)/k − ΔVⁿ + a₂Vⁿ + b₂Uⁿ + c₂·∇Vⁿ = g_V
/// ```
///
/// `c₁` and `d` live on faces; `c₂` is cell-centred per axis, paired with
/// the mean of the two adjacent face gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedStep {
    pub a1: Field,
    pub b1: Field,
    pub c1: FaceData,
    pub d: FaceData,
    pub a2: Field,
    pub b2: Field,
    pub c2: Option<[Field; 2]>,
}

impl LinearizedStep {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            a1: Field::zeros(grid),
            b1: Field::zeros(grid),
            c1: FaceData::zeros(grid),
            d: FaceData::zeros(grid),
            a2: Field::zeros(grid),
            b2: Field::zeros(grid),
            c2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedCoeffs {
    pub grid: GridSpec,
    pub k: f64,
    pub flux_scheme: FluxScheme,
    /// One entry per step `n = 1..N`.
    pub steps: Vec<LinearizedStep>,
}

/// Matrix of `V ↦ c·∇V` with cell gradients from averaged face gradients.
fn gradient_average_matrix(grid: &GridSpec, c: &[Field; 2]) -> BandMatrix {
    let mut m = BandMatrix::zeros(grid.cell_count(), grid.bandwidth());
    for (axis, ca) in c.iter().enumerate().take(grid.dim()) {
        let h = grid.spacing(axis);
        let cv = ca.values();
        for idx in 0..grid.cell_count() {
            let (i, j) = grid.coords(idx);
            let (pos, len) = if axis == 0 { (i, grid.nx()) } else { (j, grid.ny()) };
            let nb = |p: usize| if axis == 0 { grid.index(p, j) } else { grid.index(i, p) };
            let w = 0.5 * cv[idx] / h;
            if pos + 1 < len {
                m.add(idx, nb(pos + 1), w);
                m.add(idx, idx, -w);
            }
            if pos > 0 {
                m.add(idx, idx, w);
                m.add(idx, nb(pos - 1), -w);
            }
        }
    }
    m
}

struct StepOperators {
    mu: BandLu,
    k_uv: BandMatrix,
    mv: BandLu,
    k_vu: Vec<f64>,
}

impl LinearizedCoeffs {
    fn operators(&self) -> Result<Vec<StepOperators>> {
        let grid = self.grid;
        let neg_lap = neg_laplacian_matrix(&grid);
        let k = self.k;
        self.steps
            .iter()
            .map(|c| {
                let mut mu = advection_matrix(&grid, &c.c1, None, self.flux_scheme);
                mu.axpy(1.0, &neg_lap);
                mu.add_diagonal(&c.a1.values().iter().map(|a| 1.0 / k + a).collect::<Vec<_>>());
                let mut k_uv = face_diffusion_matrix(&grid, &c.d);
                k_uv.add_diagonal(c.b1.values());
                let mut mv = v_matrix(&neg_lap, c.a2.values(), k);
                if let Some(c2) = &c.c2 {
                    mv.axpy(1.0, &gradient_average_matrix(&grid, c2));
                }
                Ok(StepOperators { mu: mu.factor()?, k_uv, mv: mv.factor()?, k_vu: c.b2.values().to_vec() })
            })
            .collect()
    }

    fn check_sources(&self, g_u: &[Field], g_v: &[Field]) -> Result<()> {
        if g_u.len() != self.steps.len() || g_v.len() != self.steps.len() {
            return Err(Error::GridMismatch(format!("sources need {} steps", self.steps.len())));
        }
        for g in g_u.iter().chain(g_v) {
            self.grid.ensure_same(g.grid())?;
        }
        Ok(())
    }
}

/// Forward solve of the linearized system from zero initial data.
/// Sources are step-indexed; the result is time-indexed with `U⁰ = V⁰ = 0`.
pub fn linearized_solve(coeffs: &LinearizedCoeffs, g_u: &[Field], g_v: &[Field]) -> Result<(Vec<Field>, Vec<Field>)> {
    coeffs.check_sources(g_u, g_v)?;
    let ops = coeffs.operators()?;
    forward_with(coeffs, &ops, g_u, g_v)
}

fn forward_with(
    coeffs: &LinearizedCoeffs,
    ops: &[StepOperators],
    g_u: &[Field],
    g_v: &[Field],
) -> Result<(Vec<Field>, Vec<Field>)> {
    let grid = coeffs.grid;
    let k = coeffs.k;
    let mut us = vec![Field::zeros(grid)];
    let mut vs = vec![Field::zeros(grid)];
    for (n, op) in ops.iter().enumerate() {
        let (up, vp) = (&us[n], &vs[n]);
        let coupling = op.k_uv.matvec(vp.values());
        let rhs: Vec<f64> = (0..grid.cell_count())
            .map(|i| up.values()[i] / k - coupling[i] + g_u[n].values()[i])
            .collect();
        let u = Field::new(grid, op.mu.solve(&rhs)?)?;
        let rhs: Vec<f64> = (0..grid.cell_count())
            .map(|i| vp.values()[i] / k - op.k_vu[i] * u.values()[i] + g_v[n].values()[i])
            .collect();
        let v = Field::new(grid, op.mv.solve(&rhs)?)?;
        us.push(u);
        vs.push(v);
    }
    Ok((us, vs))
}

/// Transposed (adjoint) solve of the linearized system with step-indexed
/// sources `g_λ`, `g_η`; returns time-indexed `(λ, η)` with zero terminal
/// values. Satisfies `Σ k(⟨g_λ, U⟩ + ⟨g_η, V⟩) = Σ k(⟨λ, g_U⟩ + ⟨η, g_V⟩)`
/// when `λ`, `η` are paired with the steps they multiply.
pub fn linearized_adjoint(coeffs: &LinearizedCoeffs, g_l: &[Field], g_e: &[Field]) -> Result<AdjointPair> {
    coeffs.check_sources(g_l, g_e)?;
    let ops = coeffs.operators()?;
    let grid = coeffs.grid;
    let k = coeffs.k;
    let n_steps = ops.len();
    let mut lambda = vec![Field::zeros(grid); n_steps + 1];
    let mut eta = vec![Field::zeros(grid); n_steps + 1];
    for n in (0..n_steps).rev() {
        // multiplier of step n + 1 lives at index n; that of step n + 2 at n + 1
        let (ln, en) = (&lambda[n + 1], &eta[n + 1]);
        let back = if n + 1 < n_steps { ops[n + 1].k_uv.matvec_transpose(ln.values()) } else { vec![0.0; grid.cell_count()] };
        let rhs: Vec<f64> = (0..grid.cell_count())
            .map(|i| g_e[n].values()[i] + en.values()[i] / k - back[i])
            .collect();
        let e = Field::new(grid, ops[n].mv.solve_transpose(&rhs)?)?;
        let rhs: Vec<f64> = (0..grid.cell_count())
            .map(|i| g_l[n].values()[i] + ln.values()[i] / k - ops[n].k_vu[i] * e.values()[i])
            .collect();
        let l = Field::new(grid, ops[n].mu.solve_transpose(&rhs)?)?;
        lambda[n] = l;
        eta[n] = e;
    }
    Ok(AdjointPair { lambda, eta })
}

/// Time-indexed adjoint states; the final entries are the zero terminal values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointPair {
    pub lambda: Vec<Field>,
    pub eta: Vec<Field>,
}

impl AdjointPair {
    /// Multipliers paired with steps `1..N`.
    pub fn lambda_steps(&self) -> &[Field] {
        &self.lambda[..self.lambda.len() - 1]
    }

    pub fn eta_steps(&self) -> &[Field] {
        &self.eta[..self.eta.len() - 1]
    }
}

/// Tangent coefficients of the controlled scheme along `traj`.
pub fn tangent_coefficients(traj: &Trajectory, f: &Control, problem: &ControlProblem) -> LinearizedCoeffs {
    let grid = problem.grid;
    let (m, s) = (problem.model.m, problem.model.s);
    let steps = (1..traj.steps.len())
        .map(|n| {
            let (prev, cur) = (&traj.steps[n - 1], &traj.steps[n]);
            let vel = grad_faces(&prev.v);
            let a2 = Field::from_fn(grid, |_| 0.0).zip_map(&cur.u, |_, u| consumption(u, m, s));
            let a2 = a2.zip_map(&problem.mask.zip_map(&f[n - 1], |mk, fv| mk * fv), |c, fm| c - fm);
            let b2 = cur.u.zip_map(&cur.v, |u, v| consumption_derivative(u, m, s) * v);
            LinearizedStep {
                d: face_values(&cur.u, &vel, problem.flux_scheme),
                c1: vel,
                a2,
                b2,
                ..LinearizedStep::zeros(grid)
            }
        })
        .collect();
    LinearizedCoeffs { grid, k: problem.k, flux_scheme: problem.flux_scheme, steps }
}

/// Step-indexed tracking sources `(g_λ, g_η)`.
pub fn adjoint_sources(traj: &Trajectory, problem: &ControlProblem) -> (Vec<Field>, Vec<Field>) {
    let pu = problem.tracking_power();
    let gl = (1..traj.steps.len())
        .map(|n| traj.steps[n].u.zip_map(&problem.u_d[n], |u, d| problem.gamma_u * signed_pow(u - d, pu - 1.0)))
        .collect();
    let ge = (1..traj.steps.len())
        .map(|n| traj.steps[n].v.zip_map(&problem.v_d[n], |v, d| problem.gamma_v * (v - d)))
        .collect();
    (gl, ge)
}

pub fn adjoint_solve(traj: &Trajectory, f: &Control, problem: &ControlProblem) -> Result<AdjointPair> {
    problem.check_shapes()?;
    problem.check_control(f)?;
    if traj.steps.len() != problem.step_count() + 1 {
        return Err(Error::GridMismatch("trajectory and problem differ in step count".into()));
    }
    let coeffs = tangent_coefficients(traj, f, problem);
    let (gl, ge) = adjoint_sources(traj, problem);
    linearized_adjoint(&coeffs, &gl, &ge)
}

/// `1_Ωc (γ_f sgn(f)|f|^{q−1} + vⁿ ηⁿ)` per step.
pub fn cost_gradient(f: &Control, traj: &Trajectory, adjoint: &AdjointPair, problem: &ControlProblem) -> Control {
    let q = problem.q;
    f.iter()
        .enumerate()
        .map(|(i, fi)| {
            let n = i + 1;
            let ve = traj.steps[n].v.zip_map(&adjoint.eta[i], |v, e| v * e);
            let reg = fi.map(|x| problem.gamma_f * signed_pow(x, q - 1.0));
            (&reg + &ve).zip_map(&problem.mask, |g, m| g * m)
        })
        .collect()
}

/// Largest first-order decrease available by moving a single cell to a box
/// vertex; `|g|` where that vertex is infinite.
pub fn vi_residual(f: &Control, grad: &Control, problem: &ControlProblem) -> f64 {
    let (lo, hi) = (problem.lower, problem.upper);
    let mut worst = 0.0_f64;
    for (fi, gi) in f.iter().zip(grad) {
        for ((&x, &g), &m) in fi.values().iter().zip(gi.values()).zip(problem.mask.values()) {
            if m == 0.0 || g == 0.0 {
                continue;
            }
            let dist = if g > 0.0 { x - lo } else { hi - x };
            let r = if dist.is_finite() { g.abs() * dist } else { g.abs() };
            worst = worst.max(r);
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlIterate {
    pub f: Control,
    pub j_value: f64,
    pub gradient_norm: f64,
    pub vi_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub j_value: f64,
    pub gradient_norm: f64,
    pub vi_residual: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    pub backtrack: f64,
    pub min_step: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iters: 200, armijo: 0.5, backtrack: 0.5, min_step: 1e-14 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best: ControlIterate,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub stalled: bool,
}

/// State, cost, adjoint and gradient at one control.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub traj: Trajectory,
    pub j_value: f64,
    pub adjoint: AdjointPair,
    pub gradient: Control,
}

pub fn evaluate(f: &Control, problem: &ControlProblem) -> Result<Evaluation> {
    let traj = state_solve_controlled(&problem.u0, &problem.v0, f, problem)?;
    let j_value = cost_j(&traj, f, problem)?;
    let adjoint = adjoint_solve(&traj, f, problem)?;
    let gradient = cost_gradient(f, &traj, &adjoint, problem);
    Ok(Evaluation { traj, j_value, adjoint, gradient })
}

fn cost_only(f: &Control, problem: &ControlProblem) -> Result<f64> {
    let traj = state_solve_controlled(&problem.u0, &problem.v0, f, problem)?;
    cost_j(&traj, f, problem)
}

fn axpy_control(a: &Control, t: f64, b: &Control) -> Control {
    a.iter().zip(b).map(|(x, y)| x.zip_map(y, |p, q| p + t * q)).collect()
}

fn diff_control(a: &Control, b: &Control) -> Control {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Projected gradient descent with Barzilai-Borwein trial steps and Armijo
/// backtracking; stops on the variational-inequality residual.
pub fn projected_gradient(problem: &ControlProblem, f_init: &Control, opts: &OptimizerOptions) -> Result<OptimizationResult> {
    problem.validate()?;
    problem.check_control(f_init)?;
    let k = problem.k;
    let mut f = problem.project(f_init);
    let mut ev = evaluate(&f, problem)?;
    let norm = |g: &Control| space_time_inner(g, g, k).sqrt();
    let mut vi = vi_residual(&f, &ev.gradient, problem);
    let mut history = vec![IterationRecord {
        iteration: 0,
        j_value: ev.j_value,
        gradient_norm: norm(&ev.gradient),
        vi_residual: vi,
        step: 0.0,
    }];
    let gmax = ev.gradient.iter().map(|g| g.max_abs()).fold(0.0, f64::max);
    let mut tau = if gmax > 0.0 { 1.0 / gmax } else { 1.0 };
    let mut stalled = false;
    for it in 1..=opts.max_iters {
        if vi <= opts.tol {
            break;
        }
        let mut trial = tau;
        let accepted = loop {
            if trial < opts.min_step {
                break None;
            }
            let cand = problem.project(&axpy_control(&f, -trial, &ev.gradient));
            let d = diff_control(&cand, &f);
            let decrease = space_time_inner(&ev.gradient, &d, k);
            if decrease >= 0.0 {
                // projected step is not a descent direction at this size
                trial *= opts.backtrack;
                continue;
            }
            match cost_only(&cand, problem) {
                Ok(j) if j <= ev.j_value + opts.armijo * decrease => break Some((cand, trial)),
                Ok(_) | Err(Error::Stability { .. }) => trial *= opts.backtrack,
                Err(e) => return Err(e),
            }
        };
        let Some((f_new, step)) = accepted else {
            stalled = true;
            log::warn!("line search stalled at iteration {it}");
            break;
        };
        let ev_new = evaluate(&f_new, problem)?;
        let s = diff_control(&f_new, &f);
        let y = diff_control(&ev_new.gradient, &ev.gradient);
        let sy = space_time_inner(&s, &y, k);
        let ss = space_time_inner(&s, &s, k);
        tau = if sy > 0.0 { ss / sy } else { step * 2.0 };
        f = f_new;
        ev = ev_new;
        vi = vi_residual(&f, &ev.gradient, problem);
        history.push(IterationRecord {
            iteration: it,
            j_value: ev.j_value,
            gradient_norm: norm(&ev.gradient),
            vi_residual: vi,
            step,
        });
        log::debug!("iteration {it}: J = {:.6e}, vi = {vi:.3e}, step = {step:.3e}", ev.j_value);
    }
    let best = ControlIterate { gradient_norm: norm(&ev.gradient), f, j_value: ev.j_value, vi_residual: vi };
    Ok(OptimizationResult { converged: best.vi_residual <= opts.tol, best, history, stalled })
}

/// Random control direction built from low space-time cosine modes,
/// restricted to the control region, with unit sup-norm coefficients.
pub fn smooth_direction(problem: &ControlProblem, rng: &mut impl rand::Rng) -> Control {
    const MODES: usize = 4;
    let pi = std::f64::consts::PI;
    let lengths = problem.grid.lengths();
    let (lx, ly) = (lengths[0], lengths.get(1).copied().unwrap_or(1.0));
    let coef: Vec<f64> = (0..MODES * MODES * MODES).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let steps = problem.step_count();
    (1..=steps)
        .map(|n| {
            let t = n as f64 / steps as f64;
            let field = Field::from_fn(problem.grid, |x| {
                let mut acc = 0.0;
                for a in 0..MODES {
                    for b in 0..MODES {
                        for c in 0..MODES {
                            acc += coef[(a * MODES + b) * MODES + c]
                                * (a as f64 * pi * x[0] / lx).cos()
                                * (b as f64 * pi * x[1] / ly).cos()
                                * (c as f64 * pi * t).cos();
                        }
                    }
                }
                acc / (MODES * MODES) as f64
            });
            field.zip_map(&problem.mask, |x, m| x * m)
        })
        .collect()
}

/// Inverse-crime tracking problem: targets are the states produced by a
/// known control `f*` on the left half of a 1D domain; returns the problem
/// and `f*`.
pub fn tracking_benchmark(cells: usize, steps: usize, t_final: f64) -> Result<(ControlProblem, Control)> {
    let grid = GridSpec::new_1d(cells, 1.0)?;
    let pi = std::f64::consts::PI;
    let u0 = Field::from_fn(grid, |x| 1.0 + 0.3 * (pi * x[0]).cos());
    let v0 = Field::from_fn(grid, |x| 0.8 + 0.2 * (2.0 * pi * x[0]).cos());
    let mask = Field::from_fn(grid, |x| if x[0] < 0.5 { 1.0 } else { 0.0 });
    let k = t_final / steps as f64;
    let mut problem = ControlProblem {
        grid,
        mask,
        gamma_u: 1.0,
        gamma_v: 1.0,
        gamma_f: 1e-4,
        q: 2.0,
        tracking: TrackingExponent::Strong,
        model: ModelParams { s: 1.0, m: 100.0, alpha: 0.1 },
        flux_scheme: FluxScheme::Central,
        k,
        t_final,
        lower: -3.0,
        upper: 3.0,
        u0,
        v0,
        u_d: Vec::new(),
        v_d: Vec::new(),
    };
    let f_star: Control = (1..=steps)
        .map(|n| {
            let t = n as f64 * k;
            Field::from_fn(grid, |x| if x[0] < 0.5 { 1.0 + 0.5 * (pi * x[0]).cos() * (1.0 - t) } else { 0.0 })
        })
        .collect();
    let reference = state_solve_controlled(&problem.u0, &problem.v0, &f_star, &problem)?;
    problem.u_d = reference.steps.iter().map(|s| s.u.clone()).collect();
    problem.v_d = reference.steps.iter().map(|s| s.v.clone()).collect();
    Ok((problem, f_star))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::run;
    use rand::{Rng, SeedableRng};

    fn small_problem(cells: usize, steps: usize) -> ControlProblem {
        let (mut p, _) = tracking_benchmark(cells, steps, 0.5).unwrap();
        // perturb targets so the tracking sources are nonzero
        p.u_d = p.u_d.iter().map(|f| f.map(|x| 0.9 * x + 0.05)).collect();
        p.v_d = p.v_d.iter().map(|f| f.map(|x| 1.1 * x)).collect();
        p
    }

    fn random_control(p: &ControlProblem, rng: &mut impl Rng, amp: f64) -> Control {
        (0..p.step_count())
            .map(|_| p.mask.map(|m| m * rng.gen_range(-amp..amp)))
            .collect()
    }

    #[test]
    fn zero_control_matches_uncontrolled_solver() {
        let p = small_problem(24, 8);
        let a = state_solve_controlled(&p.u0, &p.v0, &p.zero_control(), &p).unwrap();
        let b = linearly_implicit_run(&p.u0, &p.v0, &p.scheme_params()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_control_scalar_recurrence() {
        let g = GridSpec::new_1d(10, 1.0).unwrap();
        let (mut p, _) = tracking_benchmark(10, 4, 0.4).unwrap();
        p.mask = Field::constant(g, 1.0);
        p.u0 = Field::zeros(g);
        p.v0 = Field::constant(g, 0.6);
        let (c, d, k) = (2.0, 0.6, p.k);
        let tr = state_solve_controlled(&p.u0, &p.v0, &p.constant_control(c), &p).unwrap();
        for st in &tr.steps {
            let e = d / (1.0 - k * c).powi(st.n as i32);
            assert!(st.v.values().iter().all(|&v| (v - e).abs() < 1e-13 * e));
        }
    }

    #[test]
    fn stability_guard_rejects_large_control() {
        let p = small_problem(8, 4);
        let err = state_solve_controlled(&p.u0, &p.v0, &p.constant_control(1.0 / p.k), &p).unwrap_err();
        match err {
            Error::Stability { product, suggested_k } => {
                assert!(product >= 1.0);
                assert!((suggested_k - p.k).abs() < 1e-12);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn positivity_for_signed_controls() {
        let p = small_problem(32, 16);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let f = random_control(&p, &mut rng, 0.9 / p.k);
            let tr = state_solve_controlled(&p.u0, &p.v0, &f, &p).unwrap();
            assert!(tr.steps.iter().all(|s| s.v.min() >= 0.0));
        }
    }

    #[test]
    fn cost_examples() {
        let (mut p, _) = tracking_benchmark(16, 4, 1.0).unwrap();
        let tr = state_solve_controlled(&p.u0, &p.v0, &p.zero_control(), &p).unwrap();
        p.u_d = tr.steps.iter().map(|s| s.u.clone()).collect();
        p.v_d = tr.steps.iter().map(|s| s.v.clone()).collect();
        assert_eq!(cost_j(&tr, &p.zero_control(), &p).unwrap(), 0.0);
        let c = 0.7;
        let j = cost_j(&tr, &p.constant_control(c), &p).unwrap();
        let area = p.mask.integrate();
        assert!((j - 0.5 * p.gamma_f * c * c * area * 1.0).abs() < 1e-15);

        p.q = 3.0;
        p.gamma_u = 2.0;
        p.gamma_v = 0.0;
        p.u_d = tr.steps.iter().map(|s| s.u.map(|x| x - 1.0)).collect();
        let j = cost_j(&tr, &p.zero_control(), &p).unwrap();
        assert!((j - 2.0 / 3.0).abs() < 1e-12);
        p.tracking = TrackingExponent::Weak;
        let j = cost_j(&tr, &p.zero_control(), &p).unwrap();
        assert!((j - 2.0 * 3.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sources_give_zero_adjoint() {
        let mut p = small_problem(16, 6);
        p.gamma_u = 0.0;
        p.gamma_v = 0.0;
        let f = p.zero_control();
        let tr = state_solve_controlled(&p.u0, &p.v0, &f, &p).unwrap();
        let adj = adjoint_solve(&tr, &f, &p).unwrap();
        assert!(adj.lambda.iter().chain(&adj.eta).all(|x| x.max_abs() == 0.0));
        let g = cost_gradient(&f, &tr, &adj, &p);
        assert!(g.iter().all(|x| x.max_abs() == 0.0));
    }

    #[test]
    fn adjoint_terminal_slice_is_zero() {
        let p = small_problem(16, 6);
        let f = p.constant_control(0.4);
        let tr = state_solve_controlled(&p.u0, &p.v0, &f, &p).unwrap();
        let adj = adjoint_solve(&tr, &f, &p).unwrap();
        assert_eq!(adj.lambda.len(), 7);
        assert_eq!(adj.lambda[6].max_abs(), 0.0);
        assert_eq!(adj.eta[6].max_abs(), 0.0);
        assert!(adj.eta[5].max_abs() > 0.0);
    }

    #[test]
    fn gradient_examples() {
        let p = small_problem(16, 6);
        let f = p.zero_control();
        let ev = evaluate(&f, &p).unwrap();
        for (n, g) in ev.gradient.iter().enumerate() {
            let expect = ev.traj.steps[n + 1].v.zip_map(&ev.adjoint.eta[n], |v, e| v * e).zip_map(&p.mask, |x, m| x * m);
            assert_eq!(g, &expect);
        }
        let f = p.constant_control(-0.3);
        let adj = AdjointPair {
            lambda: vec![Field::zeros(p.grid); 7],
            eta: vec![Field::zeros(p.grid); 7],
        };
        let g = cost_gradient(&f, &ev.traj, &adj, &p);
        for (gi, fi) in g.iter().zip(&f) {
            for ((x, y), m) in gi.values().iter().zip(fi.values()).zip(p.mask.values()) {
                assert!((x - m * p.gamma_f * y).abs() < 1e-18);
            }
        }
    }

    fn fd_check(p: &ControlProblem, seed: u64, dirs: usize) -> f64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let f = random_control(p, &mut rng, 1.0);
        let ev = evaluate(&f, p).unwrap();
        let eps = 1e-5;
        let mut worst = 0.0_f64;
        for _ in 0..dirs {
            let df = smooth_direction(p, &mut rng);
            let jp = cost_only(&axpy_control(&f, eps, &df), p).unwrap();
            let jm = cost_only(&axpy_control(&f, -eps, &df), p).unwrap();
            let fd = (jp - jm) / (2.0 * eps);
            let ad = space_time_inner(&ev.gradient, &df, p.k);
            worst = worst.max((ad - fd).abs() / ad.abs().max(1e-12));
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = small_problem(32, 8);
        assert!(fd_check(&p, 1, 5) <= 1e-6);
        let mut p2 = p.clone();
        p2.flux_scheme = FluxScheme::Upwind;
        p2.model.s = 2.0;
        assert!(fd_check(&p2, 2, 5) <= 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences_2d() {
        let g = GridSpec::new_2d(8, 6, 1.0, 1.0).unwrap();
        let (b, _) = tracking_benchmark(8, 5, 0.25).unwrap();
        let u0 = Field::from_fn(g, |x| 1.0 + 0.3 * (3.0 * x[0]).cos() * (2.0 * x[1]).sin());
        let v0 = Field::from_fn(g, |x| 0.7 + 0.2 * (2.0 * x[1]).cos());
        let mut p = ControlProblem {
            grid: g,
            mask: Field::from_fn(g, |x| if x[1] > 0.5 { 1.0 } else { 0.0 }),
            u0: u0.clone(),
            v0: v0.clone(),
            u_d: vec![u0.map(|x| 0.9 * x); 6],
            v_d: vec![v0.map(|x| 1.2 * x); 6],
            ..b
        };
        p.gamma_f = 1e-2;
        assert!(fd_check(&p, 3, 5) <= 1e-6);
    }

    #[test]
    fn duality_of_general_linearized_system() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for g in [GridSpec::new_1d(12, 1.0).unwrap(), GridSpec::new_2d(6, 5, 1.0, 0.8).unwrap()] {
            let n = 5;
            let mut rf = |a: f64| Field::zeros(g).map(|_| rng.gen_range(-a..a));
            let steps: Vec<LinearizedStep> = (0..n)
                .map(|_| {
                    let c1 = grad_faces(&rf(1.0));
                    let d = grad_faces(&rf(0.5)).map(|x| x.abs());
                    LinearizedStep {
                        a1: rf(1.0),
                        b1: rf(1.0),
                        c1,
                        d,
                        a2: rf(1.0),
                        b2: rf(1.0),
                        c2: Some([rf(0.5), rf(0.5)]),
                    }
                })
                .collect();
            for flux in [FluxScheme::Central, FluxScheme::Upwind] {
                let coeffs = LinearizedCoeffs { grid: g, k: 0.1, flux_scheme: flux, steps: steps.clone() };
                let gu: Vec<Field> = (0..n).map(|_| rf(1.0)).collect();
                let gv: Vec<Field> = (0..n).map(|_| rf(1.0)).collect();
                let gl: Vec<Field> = (0..n).map(|_| rf(1.0)).collect();
                let ge: Vec<Field> = (0..n).map(|_| rf(1.0)).collect();
                let (us, vs) = linearized_solve(&coeffs, &gu, &gv).unwrap();
                let adj = linearized_adjoint(&coeffs, &gl, &ge).unwrap();
                let lhs = space_time_inner(&gl, &us[1..], 0.1) + space_time_inner(&ge, &vs[1..], 0.1);
                let rhs = space_time_inner(adj.lambda_steps(), &gu, 0.1) + space_time_inner(adj.eta_steps(), &gv, 0.1);
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn linearized_examples() {
        let g = GridSpec::new_2d(5, 4, 1.0, 1.0).unwrap();
        let coeffs = LinearizedCoeffs { grid: g, k: 0.2, flux_scheme: FluxScheme::Central, steps: vec![LinearizedStep::zeros(g); 4] };
        let zero = vec![Field::zeros(g); 4];
        let (u, v) = linearized_solve(&coeffs, &zero, &zero).unwrap();
        assert!(u.iter().chain(&v).all(|f| f.max_abs() == 0.0));
        let c = 1.5;
        let (_, v) = linearized_solve(&coeffs, &zero, &vec![Field::constant(g, c); 4]).unwrap();
        for n in 1..v.len() {
            for (a, b) in v[n].values().iter().zip(v[n - 1].values()) {
                assert!((a - b - 0.2 * c).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn tangent_matches_state_perturbation() {
        let p = small_problem(20, 6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let f = random_control(&p, &mut rng, 1.0);
        let df = random_control(&p, &mut rng, 1.0);
        let base = state_solve_controlled(&p.u0, &p.v0, &f, &p).unwrap();
        let coeffs = tangent_coefficients(&base, &f, &p);
        let gu = vec![Field::zeros(p.grid); p.step_count()];
        let gv: Vec<Field> = (0..p.step_count())
            .map(|i| base.steps[i + 1].v.zip_map(&df[i], |v, d| v * d).zip_map(&p.mask, |x, m| x * m))
            .collect();
        let (_, dv) = linearized_solve(&coeffs, &gu, &gv).unwrap();
        let eps = 1e-6;
        let plus = state_solve_controlled(&p.u0, &p.v0, &axpy_control(&f, eps, &df), &p).unwrap();
        let minus = state_solve_controlled(&p.u0, &p.v0, &axpy_control(&f, -eps, &df), &p).unwrap();
        for n in 1..=p.step_count() {
            let fd = (&plus.steps[n].v - &minus.steps[n].v).map(|x| x / (2.0 * eps));
            assert!((&fd - &dv[n]).max_abs() < 1e-6 * fd.max_abs().max(1e-8));
        }
    }

    #[test]
    fn reproduces_uncontrolled_scheme_to_first_order() {
        let g = GridSpec::new_1d(64, 1.0).unwrap();
        let pi = std::f64::consts::PI;
        let u0 = Field::from_fn(g, |x| 1.0 + 0.5 * (pi * x[0]).cos());
        let v0 = Field::from_fn(g, |x| 1.0 - 0.5 * (pi * x[0]).cos());
        let diffs: Vec<f64> = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0]
            .iter()
            .map(|&k| {
                let p = SchemeParams::new(k, 0.5, ModelParams::default());
                let a = run(&u0, &v0, &p).unwrap();
                let b = linearly_implicit_run(&u0, &v0, &p).unwrap();
                (&a.last().v - &b.last().v).max_abs()
            })
            .collect();
        assert!(diffs[0] / diffs[1] > 1.6 && diffs[1] / diffs[2] > 1.6, "{diffs:?}");
    }

    #[test]
    fn optimizer_stops_at_once_on_exact_targets() {
        let (mut p, _) = tracking_benchmark(16, 4, 0.25).unwrap();
        let tr = state_solve_controlled(&p.u0, &p.v0, &p.zero_control(), &p).unwrap();
        p.u_d = tr.steps.iter().map(|s| s.u.clone()).collect();
        p.v_d = tr.steps.iter().map(|s| s.v.clone()).collect();
        let r = projected_gradient(&p, &p.zero_control(), &OptimizerOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.best.j_value, 0.0);
    }

    #[test]
    fn optimizer_descends_and_respects_mask_and_box() {
        let mut p = small_problem(16, 6);
        p.lower = -0.2;
        p.upper = 0.2;
        let opts = OptimizerOptions { max_iters: 15, ..Default::default() };
        let r = projected_gradient(&p, &p.zero_control(), &opts).unwrap();
        assert!(r.history[1].j_value < r.history[0].j_value);
        for w in r.history.windows(2) {
            assert!(w[1].j_value <= w[0].j_value);
        }
        for (fi, _) in r.best.f.iter().zip(0..) {
            for (x, m) in fi.values().iter().zip(p.mask.values()) {
                if *m == 0.0 {
                    assert_eq!(*x, 0.0);
                } else {
                    assert!((-0.2..=0.2).contains(x));
                }
            }
        }
    }

    #[test]
    fn validation_rejects_bad_problems() {
        let (p, _) = tracking_benchmark(8, 4, 0.5).unwrap();
        assert!(p.validate().is_ok());
        let mut q = p.clone();
        q.gamma_u = 0.0;
        assert!(q.validate().is_err());
        let mut q = p.clone();
        q.gamma_f = 0.0;
        q.upper = f64::INFINITY;
        assert!(q.validate().is_err());
        let mut q = p.clone();
        q.mask.values_mut()[0] = 0.5;
        assert!(q.validate().is_err());
        let mut q = p.clone();
        q.u_d.pop();
        assert!(matches!(q.validate(), Err(Error::GridMismatch(_))));
    }
}
