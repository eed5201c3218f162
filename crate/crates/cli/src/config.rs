//! Run configuration: parsed field by field so every problem is reported
//! with its path, not just the first one.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use chemotax::control::{OptimizerOptions, TrackingExponent};
use chemotax::{FluxScheme, GridSpec, ModelParams, SchemeParams, VVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Convergence,
    EnergyReport,
    Optimize,
    Validate,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Convergence => "convergence",
            Mode::EnergyReport => "energy-report",
            Mode::Optimize => "optimize",
            Mode::Validate => "validate",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        [Mode::Simulate, Mode::Convergence, Mode::EnergyReport, Mode::Optimize, Mode::Validate]
            .into_iter()
            .find(|m| m.name() == s)
    }

    fn needs_run(self) -> bool {
        self != Mode::Validate
    }
}

/// Initial-data or target recipe.
#[derive(Debug, Clone, PartialEq)]
pub enum Recipe {
    Constant(f64),
    Bump { center: [f64; 2], width: f64, amplitude: f64, base: f64 },
    Csv(PathBuf),
    /// `base + amplitude·ξ` with `ξ` uniform on `[−1, 1]`, drawn from the run seed.
    Perturbed { base: f64, amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Gaps,
    SelfConvergence,
    Variants,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSpec {
    pub study: Study,
    pub k_list: Vec<f64>,
    pub m_list: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Time-constant target fields.
    Fields { u: Recipe, v: Recipe },
    /// Targets produced by the state under a constant control on the region.
    Reference(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpec {
    /// Control region as `[x_lo, x_hi]` and `[y_lo, y_hi]`.
    pub region: [[f64; 2]; 2],
    pub gamma_u: f64,
    pub gamma_v: f64,
    pub gamma_f: f64,
    pub q: f64,
    pub tracking: TrackingExponent,
    pub lower: f64,
    pub upper: f64,
    pub targets: Targets,
    pub initial_control: f64,
    pub optimizer: OptimizerOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub grid: GridSpec,
    pub params: SchemeParams,
    pub initial: Option<(Recipe, Recipe)>,
    pub seed: u64,
    pub stride: usize,
    pub convergence: Option<ConvergenceSpec>,
    pub control: Option<ControlSpec>,
    /// The configuration as read, echoed into the manifest.
    pub raw: Value,
}

struct Parser {
    errors: Vec<String>,
    base_dir: PathBuf,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() { key.to_string() } else { format!("{path}.{key}") }
}

impl Parser {
    fn err(&mut self, path: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("{path}: {msg}"));
    }

    fn object<'a>(&mut self, v: &'a Value, path: &str) -> Option<&'a Map<String, Value>> {
        match v.as_object() {
            Some(o) => Some(o),
            None => {
                self.err(path, "expected an object");
                None
            }
        }
    }

    fn number(&mut self, obj: &Map<String, Value>, path: &str, key: &str, default: Option<f64>) -> f64 {
        let p = join(path, key);
        match obj.get(key) {
            None => default.unwrap_or_else(|| {
                self.err(&p, "missing required field");
                f64::NAN
            }),
            Some(v) => v.as_f64().unwrap_or_else(|| {
                self.err(&p, format!("expected a number, got {v}"));
                f64::NAN
            }),
        }
    }

    /// Number, or the strings "inf" / "-inf".
    fn extended(&mut self, obj: &Map<String, Value>, path: &str, key: &str, default: f64) -> f64 {
        match obj.get(key) {
            Some(Value::String(s)) if s == "inf" => f64::INFINITY,
            Some(Value::String(s)) if s == "-inf" => f64::NEG_INFINITY,
            _ => self.number(obj, path, key, Some(default)),
        }
    }

    fn positive(&mut self, obj: &Map<String, Value>, path: &str, key: &str, default: Option<f64>) -> f64 {
        let x = self.number(obj, path, key, default);
        if !x.is_nan() && !(x > 0.0 && x.is_finite()) {
            self.err(&join(path, key), format!("must be > 0, got {x}"));
        }
        x
    }

    fn count(&mut self, obj: &Map<String, Value>, path: &str, key: &str, default: usize) -> usize {
        match obj.get(key) {
            None => default,
            Some(v) => match v.as_u64() {
                Some(n) if n > 0 => n as usize,
                _ => {
                    self.err(&join(path, key), format!("expected a positive integer, got {v}"));
                    default
                }
            },
        }
    }

    fn numbers(&mut self, v: &Value, path: &str) -> Vec<f64> {
        match v.as_array() {
            Some(a) => a
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    x.as_f64().unwrap_or_else(|| {
                        self.err(&format!("{path}[{i}]"), "expected a number");
                        f64::NAN
                    })
                })
                .collect(),
            None => {
                self.err(path, "expected an array of numbers");
                Vec::new()
            }
        }
    }

    fn choice<T: Copy>(&mut self, obj: &Map<String, Value>, path: &str, key: &str, options: &[(&str, T)], default: T) -> T {
        match obj.get(key) {
            None => default,
            Some(Value::String(s)) => match options.iter().find(|(n, _)| n == s) {
                Some((_, t)) => *t,
                None => {
                    let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                    self.err(&join(path, key), format!("unknown value '{s}', expected one of {names:?}"));
                    default
                }
            },
            Some(v) => {
                self.err(&join(path, key), format!("expected a string, got {v}"));
                default
            }
        }
    }

    fn check_keys(&mut self, obj: &Map<String, Value>, path: &str, allowed: &[&str]) {
        for k in obj.keys() {
            if !allowed.contains(&k.as_str()) {
                self.err(&join(path, k), "unknown field");
            }
        }
    }

    fn grid(&mut self, v: Option<&Value>) -> Option<GridSpec> {
        let Some(v) = v else {
            return GridSpec::new_1d(128, 1.0).ok();
        };
        let obj = self.object(v, "grid")?;
        self.check_keys(obj, "grid", &["cells", "lengths"]);
        let cells: Vec<usize> = match obj.get("cells") {
            Some(Value::Array(a)) if (1..=2).contains(&a.len()) => a
                .iter()
                .enumerate()
                .map(|(i, c)| match c.as_u64() {
                    Some(n) if n >= 2 => n as usize,
                    _ => {
                        self.err(&format!("grid.cells[{i}]"), "expected an integer >= 2");
                        2
                    }
                })
                .collect(),
            Some(_) => {
                self.err("grid.cells", "expected an array of one or two cell counts");
                return None;
            }
            None => {
                self.err("grid.cells", "missing required field");
                return None;
            }
        };
        let lengths = match obj.get("lengths") {
            Some(l) => self.numbers(l, "grid.lengths"),
            None => vec![1.0; cells.len()],
        };
        if lengths.len() != cells.len() {
            self.err("grid.lengths", "must have one entry per axis of grid.cells");
            return None;
        }
        match GridSpec::new(&cells, &lengths) {
            Ok(g) => Some(g),
            Err(e) => {
                self.err("grid", e);
                None
            }
        }
    }

    fn model(&mut self, v: Option<&Value>) -> ModelParams {
        let d = ModelParams::default();
        let Some(obj) = v.and_then(|v| self.object(v, "model")) else {
            return d;
        };
        self.check_keys(obj, "model", &["s", "m", "alpha"]);
        let m = ModelParams {
            s: self.number(obj, "model", "s", Some(d.s)),
            m: self.number(obj, "model", "m", Some(d.m)),
            alpha: self.number(obj, "model", "alpha", Some(d.alpha)),
        };
        if [m.s, m.m, m.alpha].iter().all(|x| !x.is_nan()) {
            if let Err(e) = m.validate() {
                self.err("model", e);
            }
        }
        m
    }

    fn scheme(&mut self, v: Option<&Value>, model: ModelParams, required: bool) -> SchemeParams {
        let fallback = SchemeParams::new(1.0 / 64.0, 1.0, model);
        let obj = match v {
            Some(v) => match self.object(v, "scheme") {
                Some(o) => o,
                None => return fallback,
            },
            None => {
                if required {
                    self.err("scheme", "missing required block");
                }
                return fallback;
            }
        };
        self.check_keys(obj, "scheme", &["k", "t_final", "v_variant", "flux", "picard_tol", "picard_max"]);
        let k = self.positive(obj, "scheme", "k", None);
        let t_final = self.positive(obj, "scheme", "t_final", None);
        let mut p = SchemeParams::new(k, t_final, model);
        p.v_variant = self.choice(obj, "scheme", "v_variant", &[("from_z", VVariant::FromZ), ("from_u", VVariant::FromU)], VVariant::FromZ);
        p.flux_scheme =
            self.choice(obj, "scheme", "flux", &[("central", FluxScheme::Central), ("upwind", FluxScheme::Upwind)], FluxScheme::Central);
        p.picard_tol = self.positive(obj, "scheme", "picard_tol", Some(p.picard_tol));
        p.picard_max = self.count(obj, "scheme", "picard_max", p.picard_max);
        p
    }

    fn recipe(&mut self, v: &Value, path: &str) -> Option<Recipe> {
        let obj = self.object(v, path)?;
        if obj.len() != 1 {
            self.err(path, "expected exactly one of constant, bump, csv, perturbed");
            return None;
        }
        let (kind, body) = obj.iter().next().expect("one entry");
        let p = join(path, kind);
        match kind.as_str() {
            "constant" => match body.as_f64() {
                Some(c) => Some(Recipe::Constant(c)),
                None => {
                    self.err(&p, "expected a number");
                    None
                }
            },
            "bump" => {
                let o = self.object(body, &p)?;
                self.check_keys(o, &p, &["center", "width", "amplitude", "base"]);
                let center = match o.get("center") {
                    Some(c) => self.numbers(c, &join(&p, "center")),
                    None => {
                        self.err(&join(&p, "center"), "missing required field");
                        vec![]
                    }
                };
                let width = self.positive(o, &p, "width", None);
                let amplitude = self.number(o, &p, "amplitude", Some(1.0));
                let base = self.number(o, &p, "base", Some(0.0));
                if center.is_empty() || center.len() > 2 {
                    return None;
                }
                Some(Recipe::Bump { center: [center[0], center.get(1).copied().unwrap_or(0.0)], width, amplitude, base })
            }
            "csv" => {
                let Some(s) = body.as_str() else {
                    self.err(&p, "expected a file path");
                    return None;
                };
                let path = self.base_dir.join(s);
                if !path.is_file() {
                    self.err(&p, format!("file not found: {}", path.display()));
                    return None;
                }
                Some(Recipe::Csv(path))
            }
            "perturbed" => {
                let o = self.object(body, &p)?;
                self.check_keys(o, &p, &["base", "amplitude"]);
                let base = self.number(o, &p, "base", None);
                let amplitude = self.number(o, &p, "amplitude", None);
                if base < amplitude.abs() {
                    self.err(&p, "base must be at least |amplitude| to keep the data nonnegative");
                }
                Some(Recipe::Perturbed { base, amplitude })
            }
            other => {
                self.err(path, format!("unknown recipe '{other}'"));
                None
            }
        }
    }

    fn pair(&mut self, v: Option<&Value>, path: &str) -> Option<(Recipe, Recipe)> {
        let Some(v) = v else {
            self.err(path, "missing required block");
            return None;
        };
        let obj = self.object(v, path)?;
        self.check_keys(obj, path, &["u", "v"]);
        let mut get = |key: &str| match obj.get(key) {
            Some(r) => self.recipe(r, &join(path, key)),
            None => {
                self.err(&join(path, key), "missing required field");
                None
            }
        };
        let u = get("u");
        let v = get("v");
        Some((u?, v?))
    }

    fn convergence(&mut self, v: Option<&Value>) -> Option<ConvergenceSpec> {
        let Some(v) = v else {
            self.err("convergence", "missing required block");
            return None;
        };
        let obj = self.object(v, "convergence")?;
        self.check_keys(obj, "convergence", &["study", "k_list", "m_list"]);
        let study = self.choice(
            obj,
            "convergence",
            "study",
            &[("gaps", Study::Gaps), ("self", Study::SelfConvergence), ("variants", Study::Variants)],
            Study::Gaps,
        );
        let k_list = match obj.get("k_list") {
            Some(v) => self.numbers(v, "convergence.k_list"),
            None => {
                self.err("convergence.k_list", "missing required field");
                vec![]
            }
        };
        if k_list.iter().any(|k| !(*k > 0.0)) {
            self.err("convergence.k_list", "step sizes must be > 0");
        }
        let min_len = if study == Study::SelfConvergence { 4 } else { 2 };
        if !k_list.is_empty() && k_list.len() < min_len {
            self.err("convergence.k_list", format!("need at least {min_len} step sizes for this study"));
        }
        let m_list = match obj.get("m_list") {
            Some(v) => self.numbers(v, "convergence.m_list"),
            None => vec![],
        };
        Some(ConvergenceSpec { study, k_list, m_list })
    }

    fn control(&mut self, v: Option<&Value>, grid: Option<&GridSpec>) -> Option<ControlSpec> {
        let Some(v) = v else {
            self.err("control", "missing required block");
            return None;
        };
        let obj = self.object(v, "control")?;
        self.check_keys(
            obj,
            "control",
            &["region", "gamma_u", "gamma_v", "gamma_f", "q", "tracking", "lower", "upper", "targets", "initial_control", "optimizer"],
        );
        let lengths = grid.map(|g| g.lengths().to_vec()).unwrap_or_else(|| vec![1.0]);
        let mut region = [[0.0, lengths[0]], [0.0, lengths.get(1).copied().unwrap_or(1.0)]];
        match obj.get("region") {
            None => self.err("control.region", "missing required field"),
            Some(r) => match self.object(r, "control.region") {
                None => {}
                Some(ro) => {
                    self.check_keys(ro, "control.region", &["x", "y"]);
                    for (axis, key) in ["x", "y"].iter().enumerate() {
                        if let Some(iv) = ro.get(*key) {
                            let p = format!("control.region.{key}");
                            let b = self.numbers(iv, &p);
                            if b.len() == 2 && b[0] < b[1] {
                                region[axis] = [b[0], b[1]];
                            } else {
                                self.err(&p, "expected [lo, hi] with lo < hi");
                            }
                        } else if axis == 0 {
                            self.err("control.region.x", "missing required field");
                        }
                    }
                }
            },
        }
        let gamma_u = self.number(obj, "control", "gamma_u", Some(1.0));
        let gamma_v = self.number(obj, "control", "gamma_v", Some(1.0));
        let gamma_f = self.number(obj, "control", "gamma_f", Some(1e-4));
        let q = self.number(obj, "control", "q", Some(3.0));
        if q < 2.0 {
            self.err("control.q", format!("must be >= 2, got {q}"));
        }
        let tracking = self.choice(
            obj,
            "control",
            "tracking",
            &[("strong", TrackingExponent::Strong), ("weak", TrackingExponent::Weak)],
            TrackingExponent::Strong,
        );
        let lower = self.extended(obj, "control", "lower", f64::NEG_INFINITY);
        let upper = self.extended(obj, "control", "upper", f64::INFINITY);
        if lower > upper {
            self.err("control.lower", "exceeds control.upper");
        }
        let targets = match obj.get("targets") {
            None => {
                self.err("control.targets", "missing required block");
                None
            }
            Some(t) => match self.object(t, "control.targets") {
                None => None,
                Some(to) if to.contains_key("reference_control") => {
                    self.check_keys(to, "control.targets", &["reference_control"]);
                    let c = self.number(to, "control.targets", "reference_control", None);
                    Some(Targets::Reference(c))
                }
                Some(_) => self.pair(Some(t), "control.targets").map(|(u, v)| Targets::Fields { u, v }),
            },
        };
        let initial_control = self.number(obj, "control", "initial_control", Some(0.0));
        let mut optimizer = OptimizerOptions::default();
        if let Some(o) = obj.get("optimizer").and_then(|o| self.object(o, "control.optimizer")) {
            self.check_keys(o, "control.optimizer", &["tol", "max_iters"]);
            optimizer.tol = self.positive(o, "control.optimizer", "tol", Some(optimizer.tol));
            optimizer.max_iters = self.count(o, "control.optimizer", "max_iters", optimizer.max_iters);
        }
        Some(ControlSpec {
            region,
            gamma_u,
            gamma_v,
            gamma_f,
            q,
            tracking,
            lower,
            upper,
            targets: targets?,
            initial_control,
            optimizer,
        })
    }
}

/// Parses a configuration for `mode`; `base_dir` resolves relative paths.
pub fn parse_value(raw: Value, mode: Mode, base_dir: &Path) -> Result<RunConfig, Vec<String>> {
    let mut p = Parser { errors: Vec::new(), base_dir: base_dir.to_path_buf() };
    let Some(root) = raw.as_object() else {
        return Err(vec!["<root>: expected a JSON object".into()]);
    };
    p.check_keys(
        root,
        "",
        &["mode", "grid", "model", "scheme", "initial", "seed", "output", "convergence", "control"],
    );
    if let Some(m) = root.get("mode") {
        match m.as_str().and_then(Mode::parse) {
            Some(cm) if cm == mode => {}
            Some(cm) => p.err("mode", format!("config says '{}' but '{}' was requested", cm.name(), mode.name())),
            None => p.err("mode", format!("unknown mode {m}")),
        }
    }
    let grid = p.grid(root.get("grid"));
    let model = p.model(root.get("model"));
    let params = p.scheme(root.get("scheme"), model, mode.needs_run());
    let initial = if mode.needs_run() { p.pair(root.get("initial"), "initial") } else { None };
    let seed = match root.get("seed") {
        None => 0,
        Some(v) => v.as_u64().unwrap_or_else(|| {
            p.err("seed", "expected a nonnegative integer");
            0
        }),
    };
    let stride = match root.get("output").and_then(|o| p.object(o, "output")) {
        Some(o) => {
            p.check_keys(o, "output", &["stride"]);
            p.count(o, "output", "stride", 1)
        }
        None => 1,
    };
    let convergence = if mode == Mode::Convergence { p.convergence(root.get("convergence")) } else { None };
    let control = if mode == Mode::Optimize { p.control(root.get("control"), grid.as_ref()) } else { None };
    if let Some(g) = &grid {
        for (path, r) in initial.iter().flat_map(|(u, v)| [("initial.u", u), ("initial.v", v)]) {
            if let Recipe::Bump { center, .. } = r {
                if g.dim() == 1 && center[1] != 0.0 {
                    p.err(path, "bump center has a y coordinate on a 1D grid");
                }
            }
        }
    }
    if !p.errors.is_empty() {
        return Err(p.errors);
    }
    Ok(RunConfig {
        mode,
        grid: grid.expect("grid parsed without errors"),
        params,
        initial,
        seed,
        stride,
        convergence,
        control,
        raw,
    })
}

pub fn parse_config(path: &Path, mode: Mode) -> Result<RunConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| vec![format!("{}: invalid JSON: {e}", path.display())])?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_value(raw, mode, base)
}
