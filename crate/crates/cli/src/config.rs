//! Run configuration: one TOML schema shared by every subcommand.
//!
//! Parsing walks the document by hand so that every problem is reported with
//! its key path, and unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use pathmfg_core::{
    Averaging, Coupling, DiscreteSystem, EquilibriumConfig, Initialization, LinearDynamics, OcpOptions,
    ParticleMeasure, QuadraticModel,
};
use serde::Serialize;
use toml::{Table, Value};

/// Row-major matrix as read from the document.
pub type Rows = Vec<Vec<f64>>;

/// One validation problem, located by its dotted key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Every problem found in a document.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    pub issues: Vec<ConfigIssue>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.issues.iter().map(ToString::to_string).collect();
        write!(f, "{}", lines.join("\n"))
    }
}

impl ConfigError {
    fn single(path: &str, message: impl Into<String>) -> Self {
        Self {
            issues: vec![ConfigIssue {
                path: path.into(),
                message: message.into(),
            }],
        }
    }

    /// Whether some issue is reported under `path`.
    pub fn mentions(&self, path: &str) -> bool {
        self.issues.iter().any(|i| i.path.contains(path) || i.message.contains(path))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicsConfig {
    pub a: Rows,
    pub b: Rows,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub r: Rows,
    pub s: Rows,
    pub q: Rows,
    pub q_terminal: Rows,
    pub coupling: Coupling,
    pub terminal_coupling: Coupling,
    /// Declared `(c₃, c₄)`.
    pub h1: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureConfig {
    pub points: Rows,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumSection {
    pub max_rounds: usize,
    pub averaging: Averaging,
    pub tol_exploitability: f64,
    pub tol_gap: f64,
    pub init: Initialization,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OcpSection {
    pub multistart: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveSection {
    pub node: usize,
    /// Starting point; the first particle of `m0` when absent.
    pub x: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsSection {
    pub holder: bool,
    pub semiconcavity: bool,
    pub lipschitz: bool,
    pub centers: usize,
    pub lipschitz_pairs: usize,
    /// Half-width of the probe cube; the support radius of `m0` (at least 1)
    /// when absent.
    pub region_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdeSection {
    pub tests: usize,
    pub test_seed: u64,
    pub hjb_samples: usize,
    pub tol_continuity: f64,
    pub tol_hjb: f64,
    pub hjb_fraction: f64,
    pub synthesis: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessSection {
    pub runs: usize,
    pub probe_nodes: usize,
    pub probe_points: usize,
    pub tol_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneSection {
    pub pairs: usize,
    pub spread: f64,
}

/// A validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip)]
    pub threads: Option<usize>,
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub alpha: f64,
    pub radius: Option<f64>,
    pub dynamics: DynamicsConfig,
    pub steps: usize,
    pub model: ModelConfig,
    pub m0: MeasureConfig,
    pub equilibrium: EquilibriumSection,
    pub ocp: OcpSection,
    pub solve: SolveSection,
    pub diagnostics: DiagnosticsSection,
    pub pde: PdeSection,
    pub uniqueness: UniquenessSection,
    pub monotone: MonotoneSection,
}

impl RunConfig {
    pub fn state_dim(&self) -> usize {
        self.dynamics.a.len()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.b.first().map_or(0, Vec::len)
    }

    pub fn dynamics(&self) -> LinearDynamics {
        LinearDynamics::from_rows(&self.dynamics.a, &self.dynamics.b, self.dynamics.horizon)
            .expect("validated dynamics")
    }

    pub fn system(&self) -> DiscreteSystem {
        DiscreteSystem::new(self.dynamics(), self.steps).expect("validated grid")
    }

    pub fn model(&self) -> QuadraticModel {
        build_model(&self.model).expect("validated model")
    }

    pub fn m0(&self) -> ParticleMeasure {
        build_measure(self.state_dim(), &self.m0).expect("validated m0")
    }

    pub fn ocp_options(&self) -> OcpOptions {
        OcpOptions {
            multistart: self.ocp.multistart,
            seed: self.seed,
            grad_tol: self.ocp.grad_tol,
            max_iter: self.ocp.max_iter,
            memory: self.ocp.memory,
        }
    }

    pub fn equilibrium_config(&self, lipschitz: bool) -> EquilibriumConfig {
        EquilibriumConfig {
            max_rounds: self.equilibrium.max_rounds,
            averaging: self.equilibrium.averaging,
            tol_exploitability: self.equilibrium.tol_exploitability,
            tol_gap: self.equilibrium.tol_gap,
            alpha: self.alpha,
            radius: self.radius,
            lipschitz_mode: lipschitz,
            init: self.equilibrium.init,
            ocp: self.ocp_options(),
            ..EquilibriumConfig::default()
        }
    }

    /// Overrides the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.equilibrium.init = match self.equilibrium.init {
            Initialization::Reference => Initialization::Reference,
            Initialization::PerturbedControls { amplitude, .. } => Initialization::PerturbedControls { amplitude, seed },
            Initialization::Random { amplitude, .. } => Initialization::Random { amplitude, seed },
        };
        self
    }
}

fn matrix(rows: &Rows) -> DMatrix<f64> {
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j])
}

fn build_model(m: &ModelConfig) -> pathmfg_core::Result<QuadraticModel> {
    let mut model = QuadraticModel::new(
        matrix(&m.r),
        matrix(&m.s),
        matrix(&m.q),
        matrix(&m.q_terminal),
        m.coupling,
        m.terminal_coupling,
    )?;
    if let Some((c3, c4)) = m.h1 {
        model = model.with_h1_constants(c3, c4);
    }
    Ok(model)
}

fn build_measure(dim: usize, m: &MeasureConfig) -> pathmfg_core::Result<ParticleMeasure> {
    let flat: Vec<f64> = m.points.iter().flatten().copied().collect();
    ParticleMeasure::new(dim, flat, m.weights.clone())
}

struct Walker {
    issues: Vec<ConfigIssue>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl Walker {
    fn issue(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            path: path.into(),
            message: message.into(),
        });
    }

    fn check_keys(&mut self, table: &Table, path: &str, allowed: &[&str]) {
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                self.issue(join(path, key), format!("unknown key (expected one of: {})", allowed.join(", ")));
            }
        }
    }

    fn section<'a>(&mut self, table: &'a Table, key: &str, path: &str) -> Option<&'a Table> {
        match table.get(key) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                self.issue(join(path, key), "expected a table");
                None
            }
        }
    }

    fn number(&mut self, value: &Value, path: &str) -> Option<f64> {
        match value {
            Value::Float(v) if v.is_finite() => Some(*v),
            Value::Integer(v) => Some(*v as f64),
            Value::Float(_) => {
                self.issue(path, "expected a finite number");
                None
            }
            _ => {
                self.issue(path, "expected a number");
                None
            }
        }
    }

    fn f64_or(&mut self, table: &Table, key: &str, path: &str, default: f64) -> f64 {
        self.opt_f64(table, key, path).unwrap_or(default)
    }

    fn opt_f64(&mut self, table: &Table, key: &str, path: &str) -> Option<f64> {
        table.get(key).and_then(|v| self.number(v, &join(path, key)))
    }

    fn positive(&mut self, table: &Table, key: &str, path: &str, default: f64) -> f64 {
        let v = self.f64_or(table, key, path, default);
        if !(v > 0.0) {
            self.issue(join(path, key), format!("must be positive, got {v}"));
        }
        v
    }

    fn opt_u64(&mut self, table: &Table, key: &str, path: &str) -> Option<u64> {
        match table.get(key) {
            None => None,
            Some(Value::Integer(v)) if *v >= 0 => Some(*v as u64),
            Some(_) => {
                self.issue(join(path, key), "expected a nonnegative integer");
                None
            }
        }
    }

    fn count(&mut self, table: &Table, key: &str, path: &str, default: usize, min: usize) -> usize {
        let v = self.opt_u64(table, key, path).map_or(default, |v| v as usize);
        if v < min {
            self.issue(join(path, key), format!("must be at least {min}, got {v}"));
        }
        v
    }

    fn flag(&mut self, table: &Table, key: &str, path: &str, default: bool) -> bool {
        match table.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(_) => {
                self.issue(join(path, key), "expected true or false");
                default
            }
        }
    }

    fn string<'a>(&mut self, table: &'a Table, key: &str, path: &str) -> Option<&'a str> {
        match table.get(key) {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => {
                self.issue(join(path, key), "expected a string");
                None
            }
        }
    }

    fn vector(&mut self, value: &Value, path: &str) -> Option<Vec<f64>> {
        let Value::Array(items) = value else {
            self.issue(path, "expected an array of numbers");
            return None;
        };
        let mut out = Vec::with_capacity(items.len());
        let mut ok = true;
        for (i, v) in items.iter().enumerate() {
            match self.number(v, &format!("{path}[{i}]")) {
                Some(x) => out.push(x),
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    /// A row-major matrix with `rows × cols` entries when the shape is given.
    fn matrix(&mut self, value: &Value, path: &str, shape: Option<(usize, usize)>) -> Option<Rows> {
        let Value::Array(items) = value else {
            self.issue(path, "expected an array of rows");
            return None;
        };
        let mut rows = Vec::with_capacity(items.len());
        for (i, row) in items.iter().enumerate() {
            rows.push(self.vector(row, &format!("{path}[{i}]"))?);
        }
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            self.issue(path, "rows have different lengths");
            return None;
        }
        if let Some((r, c)) = shape {
            if rows.len() != r || (r > 0 && width != c) {
                self.issue(
                    path,
                    format!("expected a {r}x{c} matrix, got {}x{}", rows.len(), width),
                );
                return None;
            }
        }
        Some(rows)
    }

    fn matrix_or(&mut self, table: &Table, key: &str, path: &str, shape: (usize, usize), default: Rows) -> Rows {
        match table.get(key) {
            None => default,
            Some(v) => self.matrix(v, &join(path, key), Some(shape)).unwrap_or(default),
        }
    }

    fn coupling(&mut self, table: &Table, key: &str, path: &str) -> Coupling {
        let path = join(path, key);
        let Some(value) = table.get(key) else {
            return Coupling::None;
        };
        let Value::Table(t) = value else {
            self.issue(path, "expected a table with a `kind` key");
            return Coupling::None;
        };
        let kind = self.string(t, "kind", &path).unwrap_or("");
        match kind {
            "none" => {
                self.check_keys(t, &path, &["kind"]);
                Coupling::None
            }
            "mean_field" => {
                self.check_keys(t, &path, &["kind", "strength"]);
                Coupling::MeanField {
                    strength: self.f64_or(t, "strength", &path, 1.0),
                }
            }
            "convolution" => {
                self.check_keys(t, &path, &["kind", "strength", "width"]);
                Coupling::Convolution {
                    strength: self.f64_or(t, "strength", &path, 1.0),
                    width: self.positive(t, "width", &path, 1.0),
                }
            }
            other => {
                self.issue(
                    join(&path, "kind"),
                    format!("unknown coupling `{other}` (expected none, mean_field or convolution)"),
                );
                Coupling::None
            }
        }
    }
}

fn identity(n: usize) -> Rows {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn zeros(r: usize, c: usize) -> Rows {
    vec![vec![0.0; c]; r]
}

/// Reads `w,x1,..,xd` rows; line numbers in errors count the header as line 1.
pub fn read_measure_csv(path: &Path, dim: usize) -> Result<MeasureConfig, ConfigError> {
    let key = "m0.csv";
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ConfigError::single(key, format!("cannot read {}: {e}", path.display())))?;
    let mut issues = Vec::new();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| ConfigError::single(key, format!("malformed CSV: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        let mut fail = |message: String| {
            issues.push(ConfigIssue {
                path: key.into(),
                message: format!("row {line}: {message}"),
            })
        };
        if record.len() != dim + 1 {
            fail(format!("expected {} columns (w, x1..x{dim}), got {}", dim + 1, record.len()));
            continue;
        }
        let values: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let Ok(values) = values else {
            fail("non-numeric entry".into());
            continue;
        };
        if values.iter().any(|v| !v.is_finite()) {
            fail("non-finite entry".into());
            continue;
        }
        if values[0] < 0.0 {
            fail(format!("negative weight {}", values[0]));
            continue;
        }
        weights.push(values[0]);
        points.push(values[1..].to_vec());
    }
    if !issues.is_empty() {
        return Err(ConfigError { issues });
    }
    Ok(MeasureConfig { points, weights })
}

/// Parses and validates a configuration document.
///
/// Relative paths inside the document are resolved against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig, ConfigError> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::single("", format!("not valid TOML: {e}")))?;
    let mut w = Walker { issues: Vec::new() };
    w.check_keys(
        &root,
        "",
        &[
            "seed", "threads", "output_dir", "alpha", "radius", "dynamics", "grid", "model", "m0", "equilibrium",
            "ocp", "solve", "diagnostics", "pde", "uniqueness", "monotone",
        ],
    );

    let seed = w.opt_u64(&root, "seed", "").unwrap_or(0);
    let threads = w.opt_u64(&root, "threads", "").map(|t| t as usize);
    if threads == Some(0) {
        w.issue("threads", "must be at least 1");
    }
    let output_dir = PathBuf::from(w.string(&root, "output_dir", "").unwrap_or("runs"));
    let alpha = w.f64_or(&root, "alpha", "", 2.0);
    if !(alpha > 1.0) {
        w.issue("alpha", format!("must exceed 1, got {alpha}"));
    }
    let radius = w.opt_f64(&root, "radius", "");
    if radius.is_some_and(|r| !(r > 0.0)) {
        w.issue("radius", "must be positive");
    }

    // Dynamics fixes the dimensions everything else is checked against.
    let empty = Table::new();
    let dyn_t = match w.section(&root, "dynamics", "") {
        Some(t) => t,
        None => {
            if !root.contains_key("dynamics") {
                w.issue("dynamics", "missing required table");
            }
            &empty
        }
    };
    w.check_keys(dyn_t, "dynamics", &["a", "b", "horizon"]);
    let a = match dyn_t.get("a") {
        Some(v) => w.matrix(v, "dynamics.a", None),
        None => {
            w.issue("dynamics.a", "missing required key");
            None
        }
    };
    let d = a.as_ref().map_or(0, Vec::len);
    if let Some(a) = &a {
        if a.is_empty() || a.iter().any(|r| r.len() != d) {
            w.issue("dynamics.a", format!("expected a square matrix, got {}x{}", d, a.first().map_or(0, Vec::len)));
        }
    }
    let b = match dyn_t.get("b") {
        Some(v) => w.matrix(v, "dynamics.b", None),
        None => {
            w.issue("dynamics.b", "missing required key");
            None
        }
    };
    let k = b.as_ref().and_then(|b| b.first()).map_or(0, Vec::len);
    if let Some(b) = &b {
        if b.len() != d || k == 0 {
            w.issue("dynamics.b", format!("expected {d} rows and at least one column, got {}x{k}", b.len()));
        }
    }
    let horizon = w.positive(dyn_t, "horizon", "dynamics", 1.0);

    let grid_t = w.section(&root, "grid", "").unwrap_or(&empty);
    w.check_keys(grid_t, "grid", &["steps"]);
    let steps = w.count(grid_t, "steps", "grid", pathmfg_core::TimeGrid::DEFAULT_STEPS, 2);

    let model_t = w.section(&root, "model", "").unwrap_or(&empty);
    w.check_keys(
        model_t,
        "model",
        &["kind", "r", "s", "q", "q_terminal", "coupling", "terminal_coupling", "h1"],
    );
    if let Some(kind) = w.string(model_t, "kind", "model") {
        if kind != "quadratic" {
            w.issue("model.kind", format!("unknown model `{kind}` (expected quadratic)"));
        }
    }
    let r = w.matrix_or(model_t, "r", "model", (k, k), identity(k));
    let s = w.matrix_or(model_t, "s", "model", (k, d), zeros(k, d));
    let q = w.matrix_or(model_t, "q", "model", (d, d), zeros(d, d));
    let q_terminal = w.matrix_or(model_t, "q_terminal", "model", (d, d), zeros(d, d));
    let coupling = w.coupling(model_t, "coupling", "model");
    let terminal_coupling = w.coupling(model_t, "terminal_coupling", "model");
    let h1 = match w.section(model_t, "h1", "model") {
        Some(t) => {
            w.check_keys(t, "model.h1", &["c3", "c4"]);
            let c3 = w.f64_or(t, "c3", "model.h1", 0.0);
            let c4 = w.f64_or(t, "c4", "model.h1", 0.0);
            if c3 < 0.0 || c4 < 0.0 {
                w.issue("model.h1", "constants must be nonnegative");
            }
            Some((c3, c4))
        }
        None => None,
    };
    let model = ModelConfig {
        r,
        s,
        q,
        q_terminal,
        coupling,
        terminal_coupling,
        h1,
    };

    let m0 = match w.section(&root, "m0", "") {
        None => {
            if !root.contains_key("m0") {
                w.issue("m0", "missing required table");
            }
            None
        }
        Some(t) => {
            w.check_keys(t, "m0", &["points", "weights", "csv"]);
            match (t.get("points"), w.string(t, "csv", "m0")) {
                (Some(_), Some(_)) => {
                    w.issue("m0", "give either `points` or `csv`, not both");
                    None
                }
                (None, None) => {
                    w.issue("m0", "needs `points` or `csv`");
                    None
                }
                (None, Some(file)) => match read_measure_csv(&base_dir.join(file), d) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        w.issues.extend(e.issues);
                        None
                    }
                },
                (Some(p), None) => {
                    let points = w.matrix(p, "m0.points", None);
                    if let Some(points) = &points {
                        if points.is_empty() || points.iter().any(|r| r.len() != d) {
                            w.issue("m0.points", format!("expected a nonempty list of points in R^{d}"));
                        }
                    }
                    let weights = match t.get("weights") {
                        Some(v) => w.vector(v, "m0.weights"),
                        None => points.as_ref().map(|p| vec![1.0 / p.len().max(1) as f64; p.len()]),
                    };
                    match (points, weights) {
                        (Some(points), Some(weights)) => {
                            if weights.len() != points.len() {
                                w.issue("m0.weights", format!("expected {} weights, got {}", points.len(), weights.len()));
                            }
                            for (i, v) in weights.iter().enumerate() {
                                if *v < 0.0 {
                                    w.issue(format!("m0.weights[{i}]"), format!("negative weight {v}"));
                                }
                            }
                            Some(MeasureConfig { points, weights })
                        }
                        _ => None,
                    }
                }
            }
        }
    };

    let eq_t = w.section(&root, "equilibrium", "").unwrap_or(&empty);
    w.check_keys(
        eq_t,
        "equilibrium",
        &["max_rounds", "averaging", "lambda", "tol_exploitability", "tol_gap", "init", "init_amplitude"],
    );
    let defaults = EquilibriumConfig::default();
    let averaging = match w.string(eq_t, "averaging", "equilibrium").unwrap_or("harmonic") {
        "harmonic" => {
            if eq_t.contains_key("lambda") {
                w.issue("equilibrium.lambda", "only used with averaging = \"constant\"");
            }
            Averaging::Harmonic
        }
        "constant" => {
            let lambda = w.f64_or(eq_t, "lambda", "equilibrium", 0.5);
            if !(lambda > 0.0 && lambda <= 1.0) {
                w.issue("equilibrium.lambda", format!("must lie in (0, 1], got {lambda}"));
            }
            Averaging::Constant { lambda }
        }
        other => {
            w.issue("equilibrium.averaging", format!("unknown rule `{other}` (expected harmonic or constant)"));
            Averaging::Harmonic
        }
    };
    let amplitude = w.f64_or(eq_t, "init_amplitude", "equilibrium", 0.5);
    if !(amplitude >= 0.0) {
        w.issue("equilibrium.init_amplitude", "must be nonnegative");
    }
    let init = match w.string(eq_t, "init", "equilibrium").unwrap_or("reference") {
        "reference" => Initialization::Reference,
        "perturbed" => Initialization::PerturbedControls { amplitude, seed },
        "random" => Initialization::Random { amplitude, seed },
        other => {
            w.issue("equilibrium.init", format!("unknown initialization `{other}` (expected reference, perturbed or random)"));
            Initialization::Reference
        }
    };
    let equilibrium = EquilibriumSection {
        max_rounds: w.count(eq_t, "max_rounds", "equilibrium", defaults.max_rounds, 1),
        averaging,
        tol_exploitability: w.positive(eq_t, "tol_exploitability", "equilibrium", defaults.tol_exploitability),
        tol_gap: w.positive(eq_t, "tol_gap", "equilibrium", defaults.tol_gap),
        init,
    };

    let ocp_t = w.section(&root, "ocp", "").unwrap_or(&empty);
    w.check_keys(ocp_t, "ocp", &["multistart", "grad_tol", "max_iter", "memory"]);
    let od = OcpOptions::default();
    let ocp = OcpSection {
        multistart: w.count(ocp_t, "multistart", "ocp", od.multistart, 1),
        grad_tol: w.positive(ocp_t, "grad_tol", "ocp", od.grad_tol),
        max_iter: w.count(ocp_t, "max_iter", "ocp", od.max_iter, 1),
        memory: w.count(ocp_t, "memory", "ocp", od.memory, 1),
    };

    let solve_t = w.section(&root, "solve", "").unwrap_or(&empty);
    w.check_keys(solve_t, "solve", &["node", "x"]);
    let node = w.count(solve_t, "node", "solve", 0, 0);
    if node >= steps {
        w.issue("solve.node", format!("must be below grid.steps = {steps}"));
    }
    let x = solve_t.get("x").and_then(|v| w.vector(v, "solve.x"));
    if x.as_ref().is_some_and(|x| x.len() != d) {
        w.issue("solve.x", format!("expected a point in R^{d}"));
    }
    let solve = SolveSection { node, x };

    let diag_t = w.section(&root, "diagnostics", "").unwrap_or(&empty);
    w.check_keys(
        diag_t,
        "diagnostics",
        &["holder", "semiconcavity", "lipschitz", "centers", "lipschitz_pairs", "region_radius"],
    );
    let diagnostics = DiagnosticsSection {
        holder: w.flag(diag_t, "holder", "diagnostics", true),
        semiconcavity: w.flag(diag_t, "semiconcavity", "diagnostics", true),
        lipschitz: w.flag(diag_t, "lipschitz", "diagnostics", true),
        centers: w.count(diag_t, "centers", "diagnostics", 60, 2),
        lipschitz_pairs: w.count(diag_t, "lipschitz_pairs", "diagnostics", 200, 1),
        region_radius: w.opt_f64(diag_t, "region_radius", "diagnostics"),
    };
    if diagnostics.region_radius.is_some_and(|r| !(r > 0.0)) {
        w.issue("diagnostics.region_radius", "must be positive");
    }

    let pde_t = w.section(&root, "pde", "").unwrap_or(&empty);
    w.check_keys(
        pde_t,
        "pde",
        &["tests", "test_seed", "hjb_samples", "tol_continuity", "tol_hjb", "hjb_fraction", "synthesis"],
    );
    let pde = PdeSection {
        tests: w.count(pde_t, "tests", "pde", 20, 1),
        test_seed: w.opt_u64(pde_t, "test_seed", "pde").unwrap_or(1),
        hjb_samples: w.count(pde_t, "hjb_samples", "pde", 100, 1),
        tol_continuity: w.positive(pde_t, "tol_continuity", "pde", 5e-3),
        tol_hjb: w.positive(pde_t, "tol_hjb", "pde", 1e-3),
        hjb_fraction: w.f64_or(pde_t, "hjb_fraction", "pde", 0.8),
        synthesis: w.flag(pde_t, "synthesis", "pde", true),
    };
    if !(0.0..=1.0).contains(&pde.hjb_fraction) {
        w.issue("pde.hjb_fraction", "must lie in [0, 1]");
    }

    let uniq_t = w.section(&root, "uniqueness", "").unwrap_or(&empty);
    w.check_keys(uniq_t, "uniqueness", &["runs", "probe_nodes", "probe_points", "tol_gap"]);
    let uniqueness = UniquenessSection {
        runs: w.count(uniq_t, "runs", "uniqueness", 3, 2),
        probe_nodes: w.count(uniq_t, "probe_nodes", "uniqueness", 5, 1),
        probe_points: w.count(uniq_t, "probe_points", "uniqueness", 11, 1),
        tol_gap: w.positive(uniq_t, "tol_gap", "uniqueness", 5e-3),
    };

    let mono_t = w.section(&root, "monotone", "").unwrap_or(&empty);
    w.check_keys(mono_t, "monotone", &["pairs", "spread"]);
    let monotone = MonotoneSection {
        pairs: w.count(mono_t, "pairs", "monotone", 20, 1),
        spread: w.positive(mono_t, "spread", "monotone", 1.0),
    };

    if !w.issues.is_empty() {
        return Err(ConfigError { issues: w.issues });
    }
    let (a, b, m0) = (a.expect("checked"), b.expect("checked"), m0.expect("checked"));
    let config = RunConfig {
        seed,
        threads,
        output_dir,
        alpha,
        radius,
        dynamics: DynamicsConfig { a, b, horizon },
        steps,
        model,
        m0,
        equilibrium,
        ocp,
        solve,
        diagnostics,
        pde,
        uniqueness,
        monotone,
    };
    // Remaining checks need the assembled core types.
    let mut late = Vec::new();
    if let Err(e) = LinearDynamics::from_rows(&config.dynamics.a, &config.dynamics.b, horizon) {
        late.push(ConfigIssue { path: "dynamics".into(), message: e.to_string() });
    }
    if let Err(e) = build_model(&config.model) {
        late.push(ConfigIssue { path: "model".into(), message: e.to_string() });
    }
    if let Err(e) = build_measure(d, &config.m0) {
        late.push(ConfigIssue { path: "m0".into(), message: e.to_string() });
    }
    if !late.is_empty() {
        return Err(ConfigError { issues: late });
    }
    Ok(config)
}

/// Reads and parses a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::single("", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}
