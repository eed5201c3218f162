//! Standard initial data used by the acceptance suite, the CLI defaults and
//! the benches.

use crate::diagnostics::StudyConfig;
use crate::grid::{Field, GridSpec};
use crate::model::ModelParams;
use crate::scheme::SchemeParams;

/// `base + amplitude · exp(−|x − center|²/width²)`.
pub fn gaussian_bump(grid: GridSpec, center: [f64; 2], width: f64, amplitude: f64, base: f64) -> Field {
    let dim = grid.dim();
    Field::from_fn(grid, |x| {
        let r2: f64 = (0..dim).map(|a| (x[a] - center[a]).powi(2)).sum();
        base + amplitude * (-r2 / (width * width)).exp()
    })
}

/// 1D, 128 cells, `T = 1`, `k = 1/64`: a cell cluster next to a chemical bump.
pub fn standard_1d() -> StudyConfig {
    let g = GridSpec::new_1d(128, 1.0).expect("valid grid");
    StudyConfig {
        u0: gaussian_bump(g, [0.35, 0.0], 0.1, 2.0, 0.1),
        v0: gaussian_bump(g, [0.6, 0.0], 0.12, 1.0, 0.2),
        params: SchemeParams::new(1.0 / 64.0, 1.0, ModelParams::default()),
    }
}

/// 2D, 48 × 48 cells on the unit square, `T = 1`, `k = 1/64`.
pub fn standard_2d() -> StudyConfig {
    let g = GridSpec::new_2d(48, 48, 1.0, 1.0).expect("valid grid");
    StudyConfig {
        u0: gaussian_bump(g, [0.35, 0.4], 0.12, 2.0, 0.1),
        v0: gaussian_bump(g, [0.6, 0.55], 0.15, 1.0, 0.2),
        params: SchemeParams::new(1.0 / 64.0, 1.0, ModelParams::default()),
    }
}

/// Bumps narrow against the diffusion length `√k` of the tested steps, so
/// the interpolant gaps are dominated by the initial layer.
pub fn gap_benchmark() -> StudyConfig {
    let g = GridSpec::new_1d(128, 1.0).expect("valid grid");
    StudyConfig {
        u0: gaussian_bump(g, [0.4, 0.0], GAP_WIDTH, 1.0, 0.1),
        v0: gaussian_bump(g, [0.6, 0.0], GAP_WIDTH, 1.0, 0.1),
        params: SchemeParams::new(1.0 / 16.0, 1.0, ModelParams::default()),
    }
}

/// Lowest cosine mode: cells bunched at the left wall, chemical at the
/// right. Resolved by every tested step, for refinement studies starting
/// at `k = 1/32`.
pub fn smooth_benchmark() -> StudyConfig {
    let g = GridSpec::new_1d(128, 1.0).expect("valid grid");
    let pi = std::f64::consts::PI;
    StudyConfig {
        u0: Field::from_fn(g, |x| 1.0 + 0.5 * (pi * x[0]).cos()),
        v0: Field::from_fn(g, |x| 1.0 - 0.5 * (pi * x[0]).cos()),
        params: SchemeParams::new(1.0 / 32.0, 1.0, ModelParams::default()),
    }
}

pub const GAP_WIDTH: f64 = 0.03;

/// Dyadic steps `k₀, k₀/2, …` (`count` values).
pub fn dyadic(k0: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| k0 / f64::from(1u32 << i)).collect()
}
