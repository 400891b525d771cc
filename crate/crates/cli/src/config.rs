//! Run configuration: flat `key=value` text with dotted sections, or JSON.
//!
//! ```text
//! model.b=0.05
//! model.gamma=1
//! grid.n_x=401
//! sweep.values=0.5,1,2
//! ```

use std::path::PathBuf;

use indiff_core::dual::McSettings;
use indiff_core::vi::{default_schedule, ContinuationSettings, Extrapolation, RelaxationSettings, ScheduleEntry};
use indiff_core::{validate_params, GridSpec, ModelParams, SolverChoice};
use serde::de::Deserializer;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelParams,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub query: QueryConfig,
    #[serde(default)]
    pub eso: EsoConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Grid centred on `ln K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub half_width: f64,
    pub n_x: usize,
    pub n_theta: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { half_width: 4.0, n_x: 401, n_theta: 400 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Projected,
    Penalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: Method,
    /// Penalty parameters of the continuation, coarse to fine. Empty means
    /// the default ladder.
    #[serde(deserialize_with = "one_or_many")]
    pub epsilon: Vec<f64>,
    /// Truncation level `N`; absent means the grid half-width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_trunc: Option<f64>,
    pub extrapolation: Extrapolation,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let relax = RelaxationSettings::default();
        Self {
            method: Method::Projected,
            epsilon: Vec::new(),
            n_trunc: None,
            extrapolation: Extrapolation::default(),
            tol: relax.tol,
            max_sweeps: relax.max_sweeps,
        }
    }
}

/// Evaluation points. Empty `spots` means every `stride`-th grid node;
/// empty `times` means `n_times` equally spaced times on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    #[serde(deserialize_with = "one_or_many")]
    pub spots: Vec<f64>,
    #[serde(deserialize_with = "one_or_many")]
    pub times: Vec<f64>,
    pub stride: usize,
    pub n_times: usize,
    /// Spot of the dual check; absent means the strike.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spot: Option<f64>,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { spots: Vec::new(), times: Vec::new(), stride: 4, n_times: 11, spot: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsoConfig {
    /// Job-termination intensity.
    pub alpha: f64,
    /// Vesting date; absent means `T / 2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vesting: Option<f64>,
}

impl Default for EsoConfig {
    fn default() -> Self {
        Self { alpha: 0.0, vesting: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub n_paths: usize,
    /// Time steps per path; absent means the grid's `n_theta`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_paths: 100_000, n_steps: None, seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    #[default]
    Gamma,
    Lambda,
    B,
    C,
    Rho,
    Sigma,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Lambda => "lambda",
            SweepParam::B => "b",
            SweepParam::C => "c",
            SweepParam::Rho => "rho",
            SweepParam::Sigma => "sigma",
        }
    }

    pub fn apply(self, p: &ModelParams, v: f64) -> indiff_core::Result<ModelParams> {
        let mut q = *p;
        match self {
            SweepParam::Gamma => q.risk_aversion = v,
            SweepParam::Lambda => q.sharpe = v,
            SweepParam::B => q.drift = v,
            SweepParam::C => q.vol = v,
            SweepParam::Rho => q.correlation = v,
            SweepParam::Sigma => q.traded_vol = v,
        }
        validate_params(q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub parameter: SweepParam,
    #[serde(deserialize_with = "one_or_many")]
    pub values: Vec<f64>,
    /// Worker pool size; 0 uses every core. `INDIFF_THREADS` overrides it.
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { parameter: SweepParam::Gamma, values: vec![0.5, 1.0, 2.0], workers: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Output directory; `--out` overrides it, the working directory otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// A single scalar is accepted where a list is expected, so `x=0.5` and
/// `x=0.5,1` both parse.
fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

impl RunConfig {
    /// Reference desk setup.
    pub fn reference() -> Self {
        Self {
            model: ModelParams::new(0.05, 0.3, 0.5, 0.4, 0.25, 1.0, 1.0, 1.0).expect("reference parameters"),
            grid: GridConfig::default(),
            solver: SolverConfig::default(),
            query: QueryConfig::default(),
            eso: EsoConfig::default(),
            mc: McConfig::default(),
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// Parses key=value text, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> CliResult<Self> {
        let tree = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("json: {e}")))?
        } else {
            parse_flat(text)?
        };
        let cfg: RunConfig = serde_json::from_value(tree.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        let canonical = serde_json::to_value(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(key) = unknown_key(&tree, &canonical, "") {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Flat key=value rendering; `parse(to_flat())` gives back `self`.
    pub fn to_flat(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serialises");
        let mut lines = Vec::new();
        flatten(&tree, "", &mut lines);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn validate(&self) -> CliResult<()> {
        validate_params(self.model)?;
        self.grid_spec()?;
        let bad = |msg: String| Err(CliError::Config(msg));
        let eps = &self.solver.epsilon;
        if eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return bad(format!("solver.epsilon must be positive, got {eps:?}"));
        }
        if eps.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!("solver.epsilon must decrease, got {eps:?}"));
        }
        if let Some(n) = self.solver.n_trunc {
            if !(n.is_finite() && n >= self.grid.half_width) {
                return bad(format!("solver.n_trunc = {n} must be at least grid.half_width"));
            }
        }
        if !(self.solver.tol > 0.0) || self.solver.max_sweeps == 0 {
            return bad("solver.tol and solver.max_sweeps must be positive".into());
        }
        if self.query.spots.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("query.spots must be positive".into());
        }
        if self.query.stride == 0 || self.query.n_times < 2 {
            return bad("query.stride must be >= 1 and query.n_times >= 2".into());
        }
        if self.mc.n_paths == 0 || self.mc.n_steps == Some(0) {
            return bad("mc.n_paths and mc.n_steps must be positive".into());
        }
        if !(self.eso.alpha >= 0.0 && self.eso.alpha.is_finite()) {
            return bad(format!("eso.alpha = {} must be non-negative", self.eso.alpha));
        }
        let v = self.vesting();
        if !(v > 0.0 && v < self.model.maturity) {
            return bad(format!("eso.vesting = {v} must lie in (0, T)"));
        }
        for &v in &self.sweep.values {
            self.sweep.parameter.apply(&self.model, v)?;
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> indiff_core::Result<GridSpec> {
        GridSpec::centered(&self.model, self.grid.half_width, self.grid.n_x, self.grid.n_theta)
    }

    pub fn solver_choice(&self, p: &ModelParams, grid: &GridSpec) -> SolverChoice {
        match self.solver.method {
            Method::Projected => SolverChoice::Projected(RelaxationSettings {
                tol: self.solver.tol,
                max_sweeps: self.solver.max_sweeps,
                ..RelaxationSettings::default()
            }),
            Method::Penalty => {
                let schedule = if self.solver.epsilon.is_empty() {
                    default_schedule(grid, p)
                } else {
                    let n_trunc = self.solver.n_trunc.unwrap_or(self.grid.half_width);
                    self.solver.epsilon.iter().map(|&epsilon| ScheduleEntry { epsilon, n_trunc }).collect()
                };
                let mut settings = ContinuationSettings::new(schedule);
                settings.extrapolation = self.solver.extrapolation;
                SolverChoice::Penalty(settings)
            }
        }
    }

    pub fn mc_settings(&self) -> McSettings {
        McSettings {
            n_paths: self.mc.n_paths,
            n_steps: self.mc.n_steps.unwrap_or(self.grid.n_theta),
            seed: self.mc.seed,
        }
    }

    pub fn vesting(&self) -> f64 {
        self.eso.vesting.unwrap_or(0.5 * self.model.maturity)
    }
}

fn parse_flat(text: &str) -> CliResult<Value> {
    let mut root = Map::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        let key = key.trim();
        let value = value.trim();
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("line {}: malformed key `{key}`", n + 1)));
        }
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| CliError::Config(format!("line {}: `{part}` is both a value and a section", n + 1)))?;
        }
        let leaf = parts[parts.len() - 1].to_string();
        if node.contains_key(&leaf) {
            return Err(CliError::Config(format!("line {}: duplicate key `{key}`", n + 1)));
        }
        node.insert(leaf, parse_scalar_or_list(value));
    }
    Ok(Value::Object(root))
}

fn parse_scalar_or_list(s: &str) -> Value {
    if s.is_empty() {
        return Value::Array(Vec::new());
    }
    if s.contains(',') {
        return Value::Array(s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(parse_scalar).collect());
    }
    parse_scalar(s)
}

fn parse_scalar(s: &str) -> Value {
    if let Ok(i) = s.parse::<u64>() {
        return Value::from(i);
    }
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = s.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(f) {
            return Value::Number(n);
        }
    }
    match s {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(s.to_string()),
    }
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(child, &key, out);
            }
        }
        Value::Array(items) if items.is_empty() => out.push(format!("{prefix}=")),
        Value::Array(items) => {
            let joined: Vec<String> = items.iter().map(scalar_text).collect();
            // a trailing comma keeps a one-element list a list
            let tail = if items.len() == 1 { "," } else { "" };
            out.push(format!("{prefix}={}{tail}", joined.join(",")));
        }
        Value::Null => {}
        other => out.push(format!("{prefix}={}", scalar_text(other))),
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// First key of `input` that the parsed config does not know about.
fn unknown_key(input: &Value, canonical: &Value, prefix: &str) -> Option<String> {
    let Value::Object(map) = input else { return None };
    for (k, child) in map {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match canonical.get(k) {
            None if !child.is_null() => return Some(key),
            None => {}
            Some(c) => {
                if let Some(bad) = unknown_key(child, c, &key) {
                    return Some(bad);
                }
            }
        }
    }
    None
}
