//! Mode dispatch and artifact writing.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use chemotax::benchmarks::{gaussian_bump, standard_1d};
use chemotax::control::{
    cost_j, evaluate, projected_gradient, smooth_direction, space_time_inner, state_solve_controlled,
    tracking_benchmark, Control, ControlProblem,
};
use chemotax::diagnostics::{energy_report, interpolant_gap_rate, self_convergence, variant_agreement, StudyConfig};
use chemotax::export::{control_rows, energy_rows, field_rows, gnuplot_script, rate_rows, summary_rows, write_rows};
use chemotax::grid::{grad_faces, neumann_laplacian, poisson_neumann_solve, read_field_csv};
use chemotax::par::Execution;
use chemotax::scheme::{eyre_identity_check, run_partial};
use chemotax::{Error, Field, GridSpec, Trajectory};

use crate::config::{ControlSpec, Mode, Recipe, RunConfig, Study, Targets};

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum RunError {
    Config(Vec<String>),
    Solver(String),
    Invariant(String),
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Solver(_) => 3,
            RunError::Invariant(_) => 4,
            RunError::Io(_) => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            RunError::Config(m) => json!({"error": "config", "messages": m}),
            RunError::Solver(m) => json!({"error": "solver", "message": m}),
            RunError::Invariant(m) => json!({"error": "invariant", "message": m}),
            RunError::Io(m) => json!({"error": "io", "message": m}),
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        if e.is_invariant_violation() {
            RunError::Invariant(e.to_string())
        } else if e.is_solver_failure() {
            RunError::Solver(e.to_string())
        } else {
            match e {
                Error::Io(_) | Error::Csv(_) | Error::Json(_) => RunError::Io(e.to_string()),
                _ => RunError::Config(vec![e.to_string()]),
            }
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub gnuplot: bool,
}

/// Single writer for every artifact of a run.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    gnuplot: bool,
}

impl Outputs {
    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), RunError> {
        let mut buf = Vec::new();
        write_rows(&mut buf, rows)?;
        fs::write(self.dir.join(name), &buf)?;
        self.files.push(name.to_string());
        if self.gnuplot {
            let text = String::from_utf8_lossy(&buf);
            let header = text.lines().next().unwrap_or("");
            let columns: Vec<&str> = header.split(',').collect();
            let gp = format!("{}.gp", name.trim_end_matches(".csv"));
            fs::write(self.dir.join(&gp), gnuplot_script(name, &columns))?;
            self.files.push(gp);
        }
        Ok(())
    }
}

pub struct Outcome {
    pub results: Value,
    pub outputs: Vec<String>,
}

fn build(recipe: &Recipe, grid: GridSpec, rng: &mut ChaCha8Rng) -> Result<Field, RunError> {
    Ok(match recipe {
        Recipe::Constant(c) => Field::constant(grid, *c),
        Recipe::Bump { center, width, amplitude, base } => gaussian_bump(grid, *center, *width, *amplitude, *base),
        Recipe::Perturbed { base, amplitude } => Field::from_fn(grid, |_| base + amplitude * rng.gen_range(-1.0..=1.0)),
        Recipe::Csv(path) => {
            let f = read_field_csv(BufReader::new(fs::File::open(path)?))?;
            grid.ensure_same(f.grid()).map_err(|e| RunError::Config(vec![format!("{}: {e}", path.display())]))?;
            f
        }
    })
}

fn initial_fields(cfg: &RunConfig) -> Result<(Field, Field), RunError> {
    let (ru, rv) = cfg.initial.as_ref().expect("initial data required by parser");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u0 = build(ru, cfg.grid, &mut rng)?;
    let v0 = build(rv, cfg.grid, &mut rng)?;
    Ok((u0, v0))
}

fn trajectory_results(traj: &Trajectory) -> Value {
    let m0 = traj.initial().u.integrate();
    json!({
        "steps": traj.step_count(),
        "final_time": traj.final_time(),
        "initial_mass": m0,
        "final_mass": traj.last().u.integrate(),
        "u_min": traj.steps.iter().map(|s| s.u.min()).fold(f64::INFINITY, f64::min),
        "v_max": traj.steps.iter().map(|s| s.v.max()).fold(f64::NEG_INFINITY, f64::max),
        "picard_iterations": traj.steps.iter().map(|s| s.picard_iters).sum::<usize>(),
    })
}

fn write_trajectory(out: &mut Outputs, traj: &Trajectory, stride: usize) -> Result<(), RunError> {
    out.csv("summary.csv", &summary_rows(traj))?;
    out.csv("fields.csv", &field_rows(traj, stride))
}

fn simulate(cfg: &RunConfig, out: &mut Outputs) -> Result<Value, RunError> {
    let (u0, v0) = initial_fields(cfg)?;
    let (traj, err) = run_partial(&u0, &v0, &cfg.params);
    if let Some(t) = &traj {
        write_trajectory(out, t, cfg.stride)?;
    }
    if let Some(e) = err {
        return Err(e.into());
    }
    Ok(trajectory_results(&traj.expect("trajectory without error")))
}

fn energy(cfg: &RunConfig, out: &mut Outputs) -> Result<Value, RunError> {
    let (u0, v0) = initial_fields(cfg)?;
    let (traj, err) = run_partial(&u0, &v0, &cfg.params);
    if let Some(e) = err {
        return Err(e.into());
    }
    let traj = traj.expect("trajectory without error");
    let rep = energy_report(&traj)?;
    out.csv("energy.csv", &energy_rows(&rep))?;
    if !rep.budgets_pass {
        return Err(RunError::Invariant(format!(
            "budget check failed: mass drift {:.3e}, z slack {:.3e}, gradient slack {:.3e}",
            rep.max_mass_drift, rep.min_z_slack, rep.min_gradient_slack
        )));
    }
    Ok(json!({
        "budgets_pass": rep.budgets_pass,
        "max_mass_drift": rep.max_mass_drift,
        "min_z_slack": rep.min_z_slack,
        "min_gradient_slack": rep.min_gradient_slack,
        "gradient_budget": rep.gradient_budget,
        "inferred_constant": rep.inferred_constant,
    }))
}

fn convergence(cfg: &RunConfig, out: &mut Outputs) -> Result<Value, RunError> {
    let spec = cfg.convergence.as_ref().expect("convergence block required by parser");
    let (u0, v0) = initial_fields(cfg)?;
    let study = StudyConfig { u0, v0, params: cfg.params };
    let exec = Execution::default();
    match spec.study {
        Study::Gaps => {
            let r = interpolant_gap_rate(&study, &spec.k_list, exec)?;
            out.csv("gaps_u.csv", &rate_rows(&r.u))?;
            out.csv("gaps_z.csv", &rate_rows(&r.z))?;
            Ok(json!({"study": "gaps", "slope_u": r.u.slope, "slope_z": r.z.slope}))
        }
        Study::SelfConvergence => {
            let r = self_convergence(&study, &spec.k_list, &spec.m_list, exec)?;
            out.csv("cauchy_u.csv", &rate_rows(&r.u))?;
            out.csv("cauchy_v.csv", &rate_rows(&r.v))?;
            Ok(json!({
                "study": "self",
                "slope_u": r.u.slope,
                "slope_v": r.v.slope,
                "ratios_u": r.u_ratios,
                "ratios_v": r.v_ratios,
                "monotone": r.monotone,
                "saturation": r.saturation,
                "saturated": r.saturated,
            }))
        }
        Study::Variants => {
            let r = variant_agreement(&study, &spec.k_list, exec)?;
            out.csv("variants.csv", &rate_rows(&r))?;
            Ok(json!({"study": "variants", "slope": r.slope}))
        }
    }
}

fn control_problem(cfg: &RunConfig, spec: &ControlSpec) -> Result<ControlProblem, RunError> {
    let (u0, v0) = initial_fields(cfg)?;
    let g = cfg.grid;
    let [xr, yr] = spec.region;
    let mask = Field::from_fn(g, |x| {
        let inside_x = x[0] >= xr[0] && x[0] <= xr[1];
        let inside_y = g.dim() == 1 || (x[1] >= yr[0] && x[1] <= yr[1]);
        if inside_x && inside_y { 1.0 } else { 0.0 }
    });
    let mut problem = ControlProblem {
        grid: g,
        mask,
        gamma_u: spec.gamma_u,
        gamma_v: spec.gamma_v,
        gamma_f: spec.gamma_f,
        q: spec.q,
        tracking: spec.tracking,
        model: cfg.params.model,
        flux_scheme: cfg.params.flux_scheme,
        k: cfg.params.k,
        t_final: cfg.params.t_final,
        lower: spec.lower,
        upper: spec.upper,
        u0,
        v0,
        u_d: Vec::new(),
        v_d: Vec::new(),
    };
    let levels = problem.step_count() + 1;
    match &spec.targets {
        Targets::Reference(c) => {
            let f = problem.constant_control(*c);
            let tr = state_solve_controlled(&problem.u0, &problem.v0, &f, &problem)?;
            problem.u_d = tr.steps.iter().map(|s| s.u.clone()).collect();
            problem.v_d = tr.steps.iter().map(|s| s.v.clone()).collect();
        }
        Targets::Fields { u, v } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
            problem.u_d = vec![build(u, g, &mut rng)?; levels];
            problem.v_d = vec![build(v, g, &mut rng)?; levels];
        }
    }
    problem.validate().map_err(|e| RunError::Config(vec![format!("control: {e}")]))?;
    Ok(problem)
}

fn optimize(cfg: &RunConfig, out: &mut Outputs) -> Result<Value, RunError> {
    let spec = cfg.control.as_ref().expect("control block required by parser");
    let problem = control_problem(cfg, spec)?;
    let f0 = problem.constant_control(spec.initial_control);
    let r = projected_gradient(&problem, &f0, &spec.optimizer)?;
    out.csv("history.csv", &r.history)?;
    out.csv("control.csv", &control_rows(&r.best.f, problem.k))?;
    let traj = state_solve_controlled(&problem.u0, &problem.v0, &r.best.f, &problem)?;
    write_trajectory(out, &traj, cfg.stride)?;
    if !r.converged {
        log::warn!("optimizer stopped with vi residual {:.3e}", r.best.vi_residual);
    }
    Ok(json!({
        "converged": r.converged,
        "stalled": r.stalled,
        "iterations": r.history.len() - 1,
        "j": r.best.j_value,
        "gradient_norm": r.best.gradient_norm,
        "vi_residual": r.best.vi_residual,
    }))
}

#[derive(Serialize)]
struct CheckRow {
    check: &'static str,
    pass: bool,
    value: f64,
    tolerance: f64,
}

fn validate(out: &mut Outputs) -> Result<Value, RunError> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // summation by parts: <-Δa, b> = <∇a, ∇b>
    let g = GridSpec::new_2d(13, 9, 1.0, 0.7)?;
    let a = Field::from_fn(g, |_| rng.gen_range(-1.0..1.0));
    let b = Field::from_fn(g, |_| rng.gen_range(-1.0..1.0));
    let lhs = -neumann_laplacian(&a).inner(&b);
    let rhs = 0.25 * (grad_faces(&(&a + &b)).norm_sq() - grad_faces(&(&a - &b)).norm_sq());
    rows.push(CheckRow { check: "summation_by_parts", pass: (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), value: (lhs - rhs).abs(), tolerance: 1e-10 });

    let pi = std::f64::consts::PI;
    let errs: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&n| -> Result<f64, RunError> {
            let g = GridSpec::new_1d(n, 1.0)?;
            let rhs = Field::from_fn(g, |x| (1.0 + pi * pi) * (pi * x[0]).cos());
            let exact = Field::from_fn(g, |x| (pi * x[0]).cos());
            Ok((&poisson_neumann_solve(&rhs)? - &exact).norm(2.0)?)
        })
        .collect::<Result<_, _>>()?;
    let order = (errs[1] / errs[2]).log2();
    rows.push(CheckRow { check: "poisson_order", pass: (1.8..=2.2).contains(&order), value: order, tolerance: 0.2 });

    let mut eyre = 0.0_f64;
    for _ in 0..50 {
        let g = GridSpec::new_1d(40, 1.0)?;
        let za = Field::from_fn(g, |_| rng.gen_range(0.1..2.0));
        let zb = Field::from_fn(g, |_| rng.gen_range(0.1..2.0));
        eyre = eyre.max(eyre_identity_check(&za, &zb, rng.gen_range(1.0 / 512.0..1.0)));
    }
    rows.push(CheckRow { check: "eyre_identity", pass: eyre <= 1e-12, value: eyre, tolerance: 1e-12 });

    let canned = standard_1d();
    let traj = canned.run_with(canned.params)?;
    let rep = energy_report(&traj)?;
    let m0 = traj.initial().u.integrate();
    rows.push(CheckRow { check: "mass_conservation", pass: rep.max_mass_drift <= 1e-10 * m0, value: rep.max_mass_drift / m0, tolerance: 1e-10 });
    rows.push(CheckRow { check: "z_telescoping", pass: rep.min_z_slack >= -1e-8, value: rep.min_z_slack, tolerance: 1e-8 });
    rows.push(CheckRow { check: "gradient_budget", pass: rep.min_gradient_slack >= -1e-8, value: rep.min_gradient_slack, tolerance: 1e-8 });

    let (p, _) = tracking_benchmark(32, 8, 0.5)?;
    let f: Control = smooth_direction(&p, &mut rng);
    let d: Control = smooth_direction(&p, &mut rng);
    let ev = evaluate(&f, &p)?;
    let eps = 1e-5;
    let shifted = |t: f64| -> Control { f.iter().zip(&d).map(|(x, y)| x.zip_map(y, |a, b| a + t * b)).collect() };
    let cost = |c: &Control| -> Result<f64, Error> { cost_j(&state_solve_controlled(&p.u0, &p.v0, c, &p)?, c, &p) };
    let fd = (cost(&shifted(eps))? - cost(&shifted(-eps))?) / (2.0 * eps);
    let ad = space_time_inner(&ev.gradient, &d, p.k);
    let rel = (ad - fd).abs() / ad.abs();
    rows.push(CheckRow { check: "adjoint_gradient", pass: rel <= 1e-6, value: rel, tolerance: 1e-6 });

    out.csv("validate.csv", &rows)?;
    let checks: Value = rows.iter().map(|r| (r.check.to_string(), json!(r.pass))).collect::<serde_json::Map<_, _>>().into();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.check).collect();
    if !failed.is_empty() {
        return Err(RunError::Invariant(format!("failed checks: {}", failed.join(", "))));
    }
    Ok(json!({"checks": checks, "all_pass": true}))
}

fn write_manifest(dir: &Path, cfg: &RunConfig, outputs: &[String], wall: f64, results: &Value, error: Option<&RunError>) -> Result<(), RunError> {
    let manifest = json!({
        "tool": "chemotax",
        "version": env!("CARGO_PKG_VERSION"),
        "mode": cfg.mode.name(),
        "config": cfg.raw,
        "wall_time_s": wall,
        "outputs": outputs,
        "results": results,
        "error": error.map(RunError::to_json),
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| RunError::Io(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

/// Runs `cfg`, writing artifacts and `manifest.json` into `dir` (also on failure).
pub fn execute(cfg: &RunConfig, dir: &Path, opts: &RunOptions) -> Result<Outcome, RunError> {
    fs::create_dir_all(dir)?;
    let start = Instant::now();
    let mut out = Outputs { dir: dir.to_path_buf(), files: Vec::new(), gnuplot: opts.gnuplot };
    let result = match cfg.mode {
        Mode::Simulate => simulate(cfg, &mut out),
        Mode::EnergyReport => energy(cfg, &mut out),
        Mode::Convergence => convergence(cfg, &mut out),
        Mode::Optimize => optimize(cfg, &mut out),
        Mode::Validate => validate(&mut out),
    };
    let wall = start.elapsed().as_secs_f64();
    match result {
        Ok(results) => {
            write_manifest(dir, cfg, &out.files, wall, &results, None)?;
            Ok(Outcome { results, outputs: out.files })
        }
        Err(e) => {
            write_manifest(dir, cfg, &out.files, wall, &Value::Null, Some(&e))?;
            Err(e)
        }
    }
}
