//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any failure.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chemotax::benchmarks::{dyadic, gap_benchmark, smooth_benchmark, standard_1d, standard_2d};
use chemotax::control::{
    cost_j, evaluate, projected_gradient, smooth_direction, space_time_inner, state_solve_controlled,
    tracking_benchmark, Control, OptimizerOptions,
};
use chemotax::diagnostics::{energy_report, interpolant_gap_rate, self_convergence, variant_agreement};
use chemotax::grid::poisson_neumann_solve;
use chemotax::par::Execution;
use chemotax::scheme::eyre_identity_check;
use chemotax::{Field, FluxScheme, GridSpec, Trajectory};

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct StandardRun {
    name: &'static str,
    traj: Trajectory,
    elapsed: Duration,
    v0_max: f64,
    upwind: bool,
}

fn standard_runs() -> Vec<StandardRun> {
    let mut out = Vec::new();
    for (name, cfg) in [("1d", standard_1d()), ("2d", standard_2d())] {
        for (flux_name, flux) in [("central", FluxScheme::Central), ("upwind", FluxScheme::Upwind)] {
            let start = Instant::now();
            let traj = cfg.run_with(cfg.params.with_flux(flux)).expect("standard run");
            out.push(StandardRun {
                name: if flux_name == "central" { name } else if name == "1d" { "1d-upwind" } else { "2d-upwind" },
                traj,
                elapsed: start.elapsed(),
                v0_max: cfg.v0.max_abs(),
                upwind: flux == FluxScheme::Upwind,
            });
        }
    }
    out
}

fn mass_conservation(runs: &[StandardRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let m0 = r.traj.initial().u.integrate();
        let drift = r.traj.steps.iter().map(|s| (s.u.integrate() - m0).abs() / m0.abs()).fold(0.0, f64::max);
        let ok = drift <= 1e-10 && r.elapsed <= Duration::from_secs(30);
        pass &= ok;
        parts.push(format!("{} drift {:.1e} in {:.2}s", r.name, drift, r.elapsed.as_secs_f64()));
    }
    outcome(pass, parts.join("; "))
}

fn budgets(runs: &[StandardRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let rep = energy_report(&r.traj).expect("report");
        let ok = rep.min_z_slack >= -1e-8 && rep.min_gradient_slack >= -1e-8;
        pass &= ok;
        parts.push(format!(
            "{} z-slack {:.2e} grad-slack {:.3e} of {:.3e}",
            r.name, rep.min_z_slack, rep.min_gradient_slack, rep.gradient_budget
        ));
    }
    outcome(pass, parts.join("; "))
}

fn pointwise_bounds(runs: &[StandardRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let u_min = r.traj.steps.iter().map(|s| s.u.min()).fold(f64::INFINITY, f64::min);
        let v_min = r.traj.steps.iter().map(|s| s.v.min()).fold(f64::INFINITY, f64::min);
        let v_max = r.traj.steps.iter().map(|s| s.v.max()).fold(f64::NEG_INFINITY, f64::max);
        let z_mono = r.traj.steps.windows(2).all(|w| w[1].z.max() <= w[0].z.max());
        let u_ok = if r.upwind { u_min >= 0.0 } else { u_min >= -1e-8 };
        let ok = u_ok && v_min >= -1e-8 && v_max <= r.v0_max + 1e-8 && z_mono;
        pass &= ok;
        parts.push(format!("{} u_min {:.2e} v in [{:.2e}, {:.4}] z-mono {}", r.name, u_min, v_min, v_max, z_mono));
    }
    outcome(pass, parts.join("; "))
}

fn gap_rates() -> Outcome {
    let start = Instant::now();
    let r = interpolant_gap_rate(&gap_benchmark(), &dyadic(1.0 / 16.0, 4), Execution::default()).expect("gap study");
    let t = start.elapsed();
    let inside = |s: f64| (0.9..=1.3).contains(&s);
    outcome(
        inside(r.u.slope) && inside(r.z.slope) && t <= Duration::from_secs(120),
        format!("slopes u {:.3} z {:.3} in {:.2}s", r.u.slope, r.z.slope, t.as_secs_f64()),
    )
}

fn self_convergence_check() -> Outcome {
    let cfg = smooth_benchmark();
    let r = self_convergence(&cfg, &dyadic(1.0 / 32.0, 5), &[10.0, 20.0], Execution::default()).expect("study");
    let ratios_ok = r.u_ratios.len() == 3 && r.u_ratios.iter().all(|&x| x >= 1.7);
    let sat = &r.saturation[0];
    let sat_ok = sat.both_inactive && sat.max_difference <= 1e-12;
    outcome(
        ratios_ok && sat_ok,
        format!(
            "u ratios {:?}; m={}/{} max u {:.3} difference {:.1e}",
            r.u_ratios.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(),
            sat.m_low,
            sat.m_high,
            sat.max_u,
            sat.max_difference
        ),
    )
}

fn variant_order() -> Outcome {
    let r = variant_agreement(&smooth_benchmark(), &dyadic(1.0 / 32.0, 4), Execution::default()).expect("study");
    outcome(r.slope >= 0.9, format!("observed order {:.3}", r.slope))
}

fn eyre() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for trial in 0..200 {
        let g = if trial % 2 == 0 { GridSpec::new_1d(50, 1.0) } else { GridSpec::new_2d(12, 9, 1.0, 2.0) }.unwrap();
        // z = sqrt(v + alpha^2) over the benchmark data, k over the studied step sizes
        let a = Field::from_fn(g, |_| rng.gen_range(0.1..2.0));
        let b = Field::from_fn(g, |_| rng.gen_range(0.1..2.0));
        let k = rng.gen_range(1.0 / 512.0..1.0);
        worst = worst.max(eyre_identity_check(&a, &b, k));
    }
    outcome(worst <= 1e-12, format!("max residual {worst:.2e} over 200 pairs"))
}

fn adjoint_exactness() -> Outcome {
    let start = Instant::now();
    let (p, _) = tracking_benchmark(64, 16, 0.5).expect("benchmark");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f: Control = smooth_direction(&p, &mut rng);
    let ev = evaluate(&f, &p).expect("evaluate");
    let cost = |g: &Control| cost_j(&state_solve_controlled(&p.u0, &p.v0, g, &p).expect("state"), g, &p).expect("cost");
    let eps = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let d = smooth_direction(&p, &mut rng);
        let shifted = |t: f64| -> Control { f.iter().zip(&d).map(|(a, b)| a.zip_map(b, |x, y| x + t * y)).collect() };
        let fd = (cost(&shifted(eps)) - cost(&shifted(-eps))) / (2.0 * eps);
        let ad = space_time_inner(&ev.gradient, &d, p.k);
        worst = worst.max((ad - fd).abs() / ad.abs());
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-5 && t <= Duration::from_secs(60),
        format!("max relative error {worst:.2e} over 20 directions in {:.2}s", t.as_secs_f64()),
    )
}

fn optimality_certificate() -> Outcome {
    let start = Instant::now();
    let (p, f_star) = tracking_benchmark(64, 16, 0.5).expect("benchmark");
    let j_star = evaluate(&f_star, &p).expect("evaluate").j_value;
    let opts = OptimizerOptions { max_iters: 2000, ..Default::default() };
    let r = projected_gradient(&p, &p.zero_control(), &opts).expect("optimizer");
    let t = start.elapsed();
    let monotone = r.history.windows(2).all(|w| w[1].j_value <= w[0].j_value);
    let rel = (r.best.j_value - j_star).abs() / j_star;
    outcome(
        r.best.vi_residual <= 1e-6 && monotone && rel <= 0.05 && t <= Duration::from_secs(300),
        format!(
            "vi {:.2e} after {} iterations, J {:.4e} vs J(f*) {:.4e} ({:.2}%), monotone {monotone}, {:.2}s",
            r.best.vi_residual,
            r.history.len() - 1,
            r.best.j_value,
            j_star,
            100.0 * rel,
            t.as_secs_f64()
        ),
    )
}

fn poisson_order() -> Outcome {
    let pi = std::f64::consts::PI;
    let errors: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&n| {
            let g = GridSpec::new_1d(n, 1.0).unwrap();
            let rhs = Field::from_fn(g, |x| (1.0 + pi * pi) * (pi * x[0]).cos());
            let exact = Field::from_fn(g, |x| (pi * x[0]).cos());
            (&poisson_neumann_solve(&rhs).expect("solve") - &exact).norm(2.0).expect("norm")
        })
        .collect();
    let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let ok = orders.iter().all(|o| (1.8..=2.2).contains(o));
    outcome(ok, format!("errors {:?} orders {orders:.3?}", errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()))
}

fn main() {
    let runs = standard_runs();
    let checks: Vec<(&str, Check<'_>)> = vec![
        ("mass conservation", Box::new(|| mass_conservation(&runs))),
        ("telescoping and gradient budgets", Box::new(|| budgets(&runs))),
        ("pointwise bounds", Box::new(|| pointwise_bounds(&runs))),
        ("interpolant gap rates", Box::new(gap_rates)),
        ("self-convergence and saturation", Box::new(self_convergence_check)),
        ("variant agreement", Box::new(variant_order)),
        ("Eyre identity", Box::new(eyre)),
        ("adjoint gradient exactness", Box::new(adjoint_exactness)),
        ("optimality certificate", Box::new(optimality_certificate)),
        ("Poisson operator order", Box::new(poisson_order)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {:>2} {}: {} ({})", i + 1, if o.pass { "PASS" } else { "FAIL" }, name, o.detail);
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
