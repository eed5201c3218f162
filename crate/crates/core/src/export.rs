//! CSV writers for trajectories, reports and optimizer output.

use std::io::Write;

use serde::Serialize;

use crate::control::Control;
use crate::diagnostics::{EnergyReport, RateFit};
use crate::error::Result;
use crate::scheme::Trajectory;

/// Writes `rows` as CSV with a header derived from the row type.
pub fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryRow {
    pub n: usize,
    pub t: f64,
    pub mass: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub z_max: f64,
    pub picard_iters: usize,
    pub picard_residual: f64,
}

pub fn summary_rows(traj: &Trajectory) -> Vec<SummaryRow> {
    traj.steps
        .iter()
        .map(|s| SummaryRow {
            n: s.n,
            t: traj.time(s.n),
            mass: s.u.integrate(),
            u_min: s.u.min(),
            u_max: s.u.max(),
            v_min: s.v.min(),
            v_max: s.v.max(),
            z_max: s.z.max(),
            picard_iters: s.picard_iters,
            picard_residual: s.picard_residual,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldRow {
    pub n: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

/// Cell values at every `stride`-th step; the final step is always included.
pub fn field_rows(traj: &Trajectory, stride: usize) -> Vec<FieldRow> {
    let stride = stride.max(1);
    let last = traj.step_count();
    let grid = traj.grid;
    traj.steps
        .iter()
        .filter(|s| s.n % stride == 0 || s.n == last)
        .flat_map(|s| {
            let t = traj.time(s.n);
            (0..grid.cell_count()).map(move |i| {
                let c = grid.center(i);
                FieldRow { n: s.n, t, x: c[0], y: c[1], u: s.u.values()[i], v: s.v.values()[i], z: s.z.values()[i] }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyRow {
    pub n: usize,
    pub t: f64,
    pub energy: f64,
    pub energy_g: f64,
    pub mass_drift: f64,
    pub z_telescoping_slack: f64,
    pub gradient_budget_slack: f64,
    pub hessian: Option<f64>,
    pub grad_quartic: Option<f64>,
    pub density_grad: Option<f64>,
    pub rhs_driver: Option<f64>,
    pub inferred_ratio: Option<f64>,
}

pub fn energy_rows(report: &EnergyReport) -> Vec<EnergyRow> {
    report
        .steps
        .iter()
        .map(|s| EnergyRow {
            n: s.n,
            t: s.t,
            energy: s.energy,
            energy_g: s.energy_g,
            mass_drift: s.budgets.mass_drift,
            z_telescoping_slack: s.budgets.z_telescoping_slack,
            gradient_budget_slack: s.budgets.gradient_budget_slack,
            hessian: s.terms.map(|t| t.hessian),
            grad_quartic: s.terms.map(|t| t.grad_quartic),
            density_grad: s.terms.map(|t| t.density_grad),
            rhs_driver: s.terms.map(|t| t.rhs_driver),
            inferred_ratio: s.terms.and_then(|t| t.inferred_ratio),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateRow {
    pub k: f64,
    pub value: f64,
}

pub fn rate_rows(fit: &RateFit) -> Vec<RateRow> {
    fit.ks.iter().zip(&fit.values).map(|(&k, &value)| RateRow { k, value }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlRow {
    pub n: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub f: f64,
}

/// Control values; entry `n − 1` is reported at `t_n`.
pub fn control_rows(f: &Control, k: f64) -> Vec<ControlRow> {
    f.iter()
        .enumerate()
        .flat_map(|(i, fi)| {
            let grid = *fi.grid();
            (0..grid.cell_count()).map(move |c| {
                let x = grid.center(c);
                ControlRow { n: i + 1, t: (i + 1) as f64 * k, x: x[0], y: x[1], f: fi.values()[c] }
            })
        })
        .collect()
}

/// Gnuplot commands plotting every column after the first against it.
pub fn gnuplot_script(file: &str, columns: &[&str]) -> String {
    let mut s = format!("set datafile separator ','\nset key autotitle columnhead\n# columns: {}\n", columns.join(", "));
    let plots: Vec<String> = (2..=columns.len())
        .map(|c| format!("'{file}' using 1:{c} with linespoints"))
        .collect();
    if !plots.is_empty() {
        s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Field, GridSpec};
    use crate::model::ModelParams;
    use crate::scheme::{run, SchemeParams};

    fn traj() -> Trajectory {
        let g = GridSpec::new_1d(8, 1.0).unwrap();
        run(&Field::constant(g, 1.0), &Field::constant(g, 0.5), &SchemeParams::new(0.25, 1.0, ModelParams::default()))
            .unwrap()
    }

    fn to_string<T: Serialize>(rows: &[T]) -> String {
        let mut buf = Vec::new();
        write_rows(&mut buf, rows).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn summary_has_one_row_per_step() {
        let s = to_string(&summary_rows(&traj()));
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("n,t,mass,"));
    }

    #[test]
    fn field_rows_respect_stride_and_keep_last() {
        let rows = field_rows(&traj(), 3);
        let steps: Vec<usize> = rows.iter().map(|r| r.n).collect();
        assert_eq!(rows.len(), 3 * 8);
        assert!(steps.contains(&0) && steps.contains(&3) && steps.contains(&4));
    }

    #[test]
    fn optional_energy_terms_serialize_empty() {
        let rep = crate::diagnostics::energy_report(&traj()).unwrap();
        let s = to_string(&energy_rows(&rep));
        let first_data = s.lines().nth(1).unwrap();
        assert!(first_data.ends_with(",,,,,"));
    }

    #[test]
    fn writes_are_deterministic() {
        let a = to_string(&field_rows(&traj(), 1));
        let b = to_string(&field_rows(&traj(), 1));
        assert_eq!(a, b);
    }

    #[test]
    fn gnuplot_lists_columns() {
        let s = gnuplot_script("rate.csv", &["k", "value"]);
        assert!(s.contains("using 1:2"));
        assert!(!s.contains("using 1:3"));
    }
}
