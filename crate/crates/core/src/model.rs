//! Pointwise nonlinearities: truncations, the `g_m` family, the energy
//! density `g` and the discrete energy `E(u, z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{grad_faces, Field};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_ALPHA_MAX: f64 = 0.1;

/// Consumption power `s`, truncation level `m` and shift `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub s: f64,
    pub m: f64,
    pub alpha: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self { s: 1.0, m: 100.0, alpha: DEFAULT_ALPHA }
    }
}

impl ModelParams {
    pub fn new(s: f64, m: f64, alpha: f64) -> Result<Self> {
        let p = Self { s, m, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(DEFAULT_ALPHA_MAX)
    }

    pub fn validate_with(&self, alpha_max: f64) -> Result<()> {
        if !(self.s >= 1.0 && self.s.is_finite()) {
            return Err(Error::InvalidInput(format!("s must be >= 1, got {}", self.s)));
        }
        if !(self.m >= 1.0 && self.m.is_finite()) {
            return Err(Error::InvalidInput(format!("m must be >= 1, got {}", self.m)));
        }
        if !(self.alpha > 0.0 && self.alpha <= alpha_max) {
            return Err(Error::InvalidInput(format!(
                "alpha must lie in (0, {alpha_max}], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Upper truncation `min(r, m)`.
#[inline]
pub fn tm_cap(r: f64, m: f64) -> f64 {
    r.min(m)
}

/// Quintic Hermite interpolant on `[a, a + len]` matching value, first and
/// second derivative at both ends.
fn quintic_hermite(t: f64, len: f64, p0: [f64; 3], p1: [f64; 3]) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    let t5 = t4 * t;
    let h0 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
    let h1 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
    let h2 = 0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5;
    let h3 = 0.5 * t3 - t4 + 0.5 * t5;
    let h4 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
    let h5 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
    p0[0] * h0
        + len * p0[1] * h1
        + len * len * p0[2] * h2
        + len * len * p1[2] * h3
        + len * p1[1] * h4
        + p1[0] * h5
}

/// Bounded C² truncation of the identity: `−1` below `−2`, identity on
/// `[0, m]`, `m + 1` above `m + 2`, quintic blends in between.
pub fn tm_smooth(r: f64, m: f64) -> f64 {
    if r <= -2.0 {
        -1.0
    } else if r < 0.0 {
        quintic_hermite((r + 2.0) / 2.0, 2.0, [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    } else if r <= m {
        r
    } else if r < m + 2.0 {
        quintic_hermite((r - m) / 2.0, 2.0, [m, 1.0, 0.0], [m + 1.0, 0.0, 0.0])
    } else {
        m + 1.0
    }
}

/// `g'_m(r)`: `ln T^m(r)` for `s = 1`, `T^m(r)^{s−1}/(s−1)` otherwise.
pub fn gm_prime(r: f64, params: &ModelParams) -> Result<f64> {
    if params.s == 1.0 {
        if r <= 0.0 {
            return Err(Error::Domain(format!("g'_m needs r > 0 when s = 1, got {r}")));
        }
        Ok(tm_cap(r, params.m).ln())
    } else {
        if r < 0.0 {
            return Err(Error::Domain(format!("g'_m needs r >= 0, got {r}")));
        }
        Ok(tm_cap(r, params.m).powf(params.s - 1.0) / (params.s - 1.0))
    }
}

fn gm_primitive_below_cap(r: f64, s: f64) -> f64 {
    if s == 1.0 {
        if r == 0.0 { 0.0 } else { r * r.ln() - r }
    } else {
        r.powf(s) / (s * (s - 1.0))
    }
}

/// `g_m(r) = ∫₀^r g'_m`, extended linearly beyond `m`.
pub fn gm_primitive(r: f64, params: &ModelParams) -> Result<f64> {
    if r < 0.0 {
        return Err(Error::Domain(format!("g_m needs r >= 0, got {r}")));
    }
    let m = params.m;
    if r <= m {
        Ok(gm_primitive_below_cap(r, params.s))
    } else {
        Ok(gm_primitive_below_cap(m, params.s) + gm_prime(m, params)? * (r - m))
    }
}

/// Energy density `g(u)`: `(u+1)ln(u+1) − u` for `s = 1`, `u^s/(s(s−1))` otherwise.
pub fn g_energy_density(u: f64, s: f64) -> Result<f64> {
    if u < 0.0 {
        return Err(Error::Domain(format!("g needs u >= 0, got {u}")));
    }
    if s == 1.0 {
        Ok((u + 1.0) * (u + 1.0).ln() - u)
    } else {
        Ok(u.powf(s) / (s * (s - 1.0)))
    }
}

const NEG_TOL: f64 = 1e-12;

fn clamp_density(u: f64) -> Result<f64> {
    if u < -NEG_TOL {
        Err(Error::Domain(format!("negative density {u}")))
    } else {
        Ok(u.max(0.0))
    }
}

/// `E(u, z) = (s/4) ∫ g(u) + ½ ‖∇z‖²`.
pub fn energy_e(u: &Field, z: &Field, s: f64) -> Result<f64> {
    u.grid().ensure_same(z.grid())?;
    let mut acc = 0.0;
    for &v in u.values() {
        acc += g_energy_density(clamp_density(v)?, s)?;
    }
    Ok(0.25 * s * acc * u.grid().cell_volume() + 0.5 * grad_faces(z).norm_sq())
}

/// Truncated energy `(s/4) ∫ g_m(u) + ½ ‖∇z‖²` used by the per-step
/// energy inequalities.
pub fn energy_m(u: &Field, z: &Field, params: &ModelParams) -> Result<f64> {
    u.grid().ensure_same(z.grid())?;
    let mut acc = 0.0;
    for &v in u.values() {
        acc += gm_primitive(clamp_density(v)?, params)?;
    }
    Ok(0.25 * params.s * acc * u.grid().cell_volume() + 0.5 * grad_faces(z).norm_sq())
}

/// Consumption rate `T^m(u⁺)^s`; the positive part keeps fractional powers
/// defined for round-off negatives.
#[inline]
pub fn consumption(u: f64, m: f64, s: f64) -> f64 {
    tm_cap(u.max(0.0), m).powf(s)
}

/// Derivative of [`consumption`] in `u` (zero where the cap or the positive
/// part is active).
#[inline]
pub fn consumption_derivative(u: f64, m: f64, s: f64) -> f64 {
    if u < 0.0 || u >= m {
        0.0
    } else {
        s * u.powf(s - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use proptest::prelude::*;

    fn p(s: f64, m: f64) -> ModelParams {
        ModelParams { s, m, alpha: 0.1 }
    }

    #[test]
    fn cap_examples() {
        assert_eq!(tm_cap(3.0, 5.0), 3.0);
        assert_eq!(tm_cap(7.0, 5.0), 5.0);
        assert_eq!(tm_cap(5.0, 5.0), 5.0);
    }

    #[test]
    fn smooth_examples() {
        assert_eq!(tm_smooth(-3.0, 5.0), -1.0);
        assert_eq!(tm_smooth(2.0, 5.0), 2.0);
        assert_eq!(tm_smooth(10.0, 5.0), 6.0);
    }

    #[test]
    fn smooth_is_c2_across_knots() {
        let m = 5.0;
        let h = 1e-4;
        let d1 = |x: f64| (tm_smooth(x + h, m) - tm_smooth(x - h, m)) / (2.0 * h);
        let d2 = |x: f64| (tm_smooth(x + h, m) - 2.0 * tm_smooth(x, m) + tm_smooth(x - h, m)) / (h * h);
        for knot in [-2.0, 0.0, m, m + 2.0] {
            let e = 1e-3;
            assert!((tm_smooth(knot - e, m) - tm_smooth(knot + e, m)).abs() < 1e-2);
            assert!((d1(knot - e) - d1(knot + e)).abs() < 1e-2, "d1 jump at {knot}");
            assert!((d2(knot - e) - d2(knot + e)).abs() < 5e-2, "d2 jump at {knot}");
        }
    }

    #[test]
    fn gm_prime_examples() {
        assert_eq!(gm_prime(1.0, &p(1.0, 10.0)).unwrap(), 0.0);
        assert_eq!(gm_prime(3.0, &p(2.0, 10.0)).unwrap(), 3.0);
        assert_eq!(gm_prime(15.0, &p(2.0, 10.0)).unwrap(), 10.0);
        assert!(matches!(gm_prime(0.0, &p(1.0, 10.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn gm_primitive_examples() {
        assert_eq!(gm_primitive(0.0, &p(1.0, 10.0)).unwrap(), 0.0);
        assert!(gm_primitive(1e-12, &p(1.0, 10.0)).unwrap().abs() < 1e-10);
        assert_eq!(gm_primitive(2.0, &p(2.0, 10.0)).unwrap(), 2.0);
        assert_eq!(gm_primitive(12.0, &p(2.0, 10.0)).unwrap(), 70.0);
        assert!(gm_primitive(-1.0, &p(2.0, 10.0)).is_err());
    }

    #[test]
    fn gm_primitive_matches_quadrature_of_derivative() {
        // composite Simpson on g'_m as an independent oracle
        for (s, m, r) in [(2.0, 3.0, 5.5), (1.5, 2.0, 1.7), (3.0, 1.0, 2.5), (1.0, 2.0, 3.0)] {
            let prm = p(s, m);
            let n = 20000;
            let a = if s == 1.0 { 1e-12 } else { 0.0 };
            let h = (r - a) / n as f64;
            let mut acc = gm_prime(a.max(1e-300), &prm).unwrap_or(0.0) + gm_prime(r, &prm).unwrap();
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * gm_prime(a + i as f64 * h, &prm).unwrap();
            }
            let simpson = acc * h / 3.0;
            let exact = gm_primitive(r, &prm).unwrap();
            let tol = if s == 1.0 { 1e-3 } else if s.fract() != 0.0 { 1e-6 } else { 1e-8 };
            assert!((simpson - exact).abs() < tol, "s={s} m={m} r={r}: {simpson} vs {exact}");
        }
    }

    #[test]
    fn energy_density_examples() {
        assert_eq!(g_energy_density(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(g_energy_density(2.0, 2.0).unwrap(), 2.0);
        assert!((g_energy_density(1.0, 3.0).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!(g_energy_density(-0.5, 2.0).is_err());
    }

    #[test]
    fn energy_examples() {
        let g = GridSpec::new_1d(50, 1.0).unwrap();
        let zc = Field::constant(g, 0.7);
        assert_eq!(energy_e(&Field::zeros(g), &zc, 1.0).unwrap(), 0.0);
        let e = energy_e(&Field::constant(g, 2.0), &zc, 2.0).unwrap();
        assert!((e - 1.0).abs() < 1e-13);
        // z = x: the interior-face sum gives (1 − h)/2, within h of 1/2
        let zx = Field::from_fn(g, |x| x[0]);
        let e = energy_e(&Field::zeros(g), &zx, 1.0).unwrap();
        let h = g.spacing(0);
        assert!((e - 0.5 * (1.0 - h)).abs() < 1e-12);
        assert!((e - 0.5).abs() <= h);
        assert!(energy_e(&Field::constant(g, -1e-6), &zc, 1.0).is_err());
        assert!(energy_e(&Field::constant(g, -1e-14), &zc, 1.0).is_ok());
    }

    proptest! {
        #[test]
        fn truncation_bounds(r in 0.0f64..100.0, m in 1.0f64..20.0) {
            let c = tm_cap(r, m);
            prop_assert!((0.0..=m).contains(&c));
            let t = tm_smooth(r, m);
            prop_assert!((0.0..=m + 1.0).contains(&t));
            prop_assert!(tm_smooth(r + 1e-3, m) >= t - 1e-14);
        }

        #[test]
        fn gm_primitive_convex_on_cap_interval(s in 1.0f64..4.0, m in 1.0f64..10.0, x in 0.01f64..1.0) {
            let prm = p(s, m);
            let r = x * (m - 0.02) + 0.01;
            let h = 1e-3_f64.min(r / 2.0);
            let d2 = gm_primitive(r + h, &prm).unwrap() - 2.0 * gm_primitive(r, &prm).unwrap()
                + gm_primitive(r - h, &prm).unwrap();
            prop_assert!(d2 >= -1e-12);
        }

        #[test]
        fn energy_nonnegative_and_z_shift_invariant(seed in any::<u64>(), s in 1.0f64..3.0, c in -2.0f64..2.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = GridSpec::new_2d(6, 5, 1.0, 1.0).unwrap();
            let u = Field::zeros(g).map(|_| rng.gen_range(0.0..3.0));
            let z = Field::zeros(g).map(|_| rng.gen_range(0.0..3.0));
            let e = energy_e(&u, &z, s).unwrap();
            prop_assert!(e >= 0.0);
            let a = energy_e(&u, &Field::constant(g, c), s).unwrap();
            let b = energy_e(&u, &Field::constant(g, c + 1.0), s).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
