//! Run configuration: flat `key = value` lines with dotted section prefixes.
//!
//! ```text
//! # comment
//! model.kernel.g = bjerksund
//! model.kernel.g.a = 1
//! grid.dt = 0.01
//! run.outputs = boundary, field
//! ```
//!
//! Keys are unique, unknown keys are rejected, and every error carries the
//! offending line.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::drivers::{Driver, JumpLaw};
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::scheme::{BoundaryMode, GridSpec, Model};
use crate::volatility::VolatilityModel;

#[derive(Clone, Debug)]
struct Entry {
    line: usize,
    value: String,
}

/// Parsed key/value pairs; lookups record which keys were consumed.
#[derive(Debug, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, Entry>,
    used: RefCell<BTreeSet<String>>,
}

fn config_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config { line, message: message.into() }
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.split('.').all(|seg| !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(config_err(line, format!("expected `key = value`, got `{content}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            if !valid_key(key) {
                return Err(config_err(line, format!("malformed key `{key}`")));
            }
            if value.is_empty() {
                return Err(config_err(line, format!("missing value for `{key}`")));
            }
            if let Some(prev) = entries.get(key) {
                let Entry { line: first, .. } = prev;
                return Err(config_err(line, format!("duplicate key `{key}` (first set on line {first})")));
            }
            entries.insert(key.to_string(), Entry { line, value: value.to_string() });
        }
        Ok(ConfigMap { entries, used: RefCell::default() })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Raw value and line of `key`.
    pub fn raw(&self, key: &str) -> Option<(&str, usize)> {
        let e = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some((e.value.as_str(), e.line))
    }

    pub fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    fn parsed<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| config_err(line, format!("`{key}` expects {what}, got `{v}`"))),
        }
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>> {
        self.parsed(key, "a number")
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    pub fn f64_req(&self, key: &str) -> Result<f64> {
        self.f64_opt(key)?.ok_or_else(|| config_err(0, format!("missing required key `{key}`")))
    }

    pub fn usize_opt(&self, key: &str) -> Result<Option<usize>> {
        self.parsed(key, "a nonnegative integer")
    }

    pub fn u64_opt(&self, key: &str) -> Result<Option<u64>> {
        self.parsed(key, "a nonnegative integer")
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        Ok(self.parsed(key, "true or false")?.unwrap_or(default))
    }

    pub fn list_f64(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some((v, line)) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|s| {
                let s = s.trim();
                s.parse().map_err(|_| config_err(line, format!("`{key}`: `{s}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()
            .map(Some)
    }

    /// Fails on the first key no lookup has touched.
    pub fn reject_unused(&self) -> Result<()> {
        let used = self.used.borrow();
        let stray = self
            .entries
            .iter()
            .filter(|(k, _)| !used.contains(*k))
            .min_by_key(|(_, e)| e.line);
        match stray {
            Some((k, e)) => Err(config_err(e.line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Files `simulate` can emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Output {
    Boundary,
    Field,
    Moments,
    Budget,
    Increments,
    Paths,
}

impl FromStr for Output {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "boundary" => Output::Boundary,
            "field" => Output::Field,
            "moments" => Output::Moments,
            "budget" => Output::Budget,
            "increments" => Output::Increments,
            "paths" => Output::Paths,
            _ => return Err(format!("unknown output `{s}`")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub paths: usize,
    pub outputs: Vec<Output>,
    pub out_dir: PathBuf,
    pub truncation_tol: f64,
    pub bench_runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: Model,
    pub grid: GridSpec,
    pub run: RunSection,
    /// Hex SHA-256 of the config text.
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn tag<'a>(cfg: &'a ConfigMap, key: &str) -> Option<(&'a str, usize)> {
    cfg.raw(key)
}

/// Re-attaches a constructor error to the line that chose the variant.
fn at(line: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidArgument(m) => config_err(line, m),
        other => other,
    }
}

fn kernel(cfg: &ConfigMap, prefix: &str, default: Option<Kernel>) -> Result<Kernel> {
    let Some((kind, line)) = tag(cfg, prefix) else {
        return default.ok_or_else(|| config_err(0, format!("missing required key `{prefix}`")));
    };
    let key = |k: &str| format!("{prefix}.{k}");
    let base = match kind {
        "zero" => Ok(Kernel::Zero),
        "constant" => Kernel::constant(cfg.f64_req(&key("level"))?),
        "exponential" => Kernel::exponential(cfg.f64_req(&key("alpha"))?),
        "bjerksund" => Kernel::bjerksund(cfg.f64_req(&key("a"))?, cfg.f64_req(&key("b"))?, cfg.f64_req(&key("alpha"))?),
        "fbm" => Kernel::power_fbm(cfg.f64_req(&key("hurst"))?),
        "regularized_fbm" => Kernel::regularized_fbm(cfg.f64_req(&key("hurst"))?, cfg.f64_req(&key("epsilon"))?),
        other => return Err(config_err(line, format!("unknown kernel `{other}`"))),
    }
    .map_err(at(line))?;
    let mut k = base;
    if let Some(offset) = cfg.f64_opt(&key("shift"))? {
        k = k.shifted(offset).map_err(at(cfg.line_of(&key("shift"))))?;
    }
    if let Some(support) = cfg.f64_opt(&key("support"))? {
        k = k.truncated(support).map_err(at(cfg.line_of(&key("support"))))?;
    }
    Ok(k)
}

fn jump_law(cfg: &ConfigMap, prefix: &str) -> Result<JumpLaw> {
    let (kind, line) = tag(cfg, prefix).ok_or_else(|| config_err(0, format!("missing required key `{prefix}`")))?;
    let key = |k: &str| format!("{prefix}.{k}");
    Ok(match kind {
        "fixed" => JumpLaw::Fixed { size: cfg.f64_req(&key("size"))? },
        "normal" => JumpLaw::Normal { mean: cfg.f64_req(&key("mean"))?, variance: cfg.f64_req(&key("variance"))? },
        "exponential" => JumpLaw::Exponential { mean: cfg.f64_req(&key("mean"))? },
        other => return Err(config_err(line, format!("unknown jump law `{other}`"))),
    })
}

/// Driver at `prefix`; subordinators are never compensated.
fn driver(cfg: &ConfigMap, prefix: &str, subordinator: bool) -> Result<Driver> {
    let default = if subordinator { None } else { Some(("brownian", 0)) };
    let (kind, line) = tag(cfg, prefix)
        .or(default)
        .ok_or_else(|| config_err(0, format!("missing required key `{prefix}`")))?;
    let key = |k: &str| format!("{prefix}.{k}");
    let compensated = if subordinator {
        if cfg.bool_or(&key("compensated"), false)? {
            return Err(config_err(cfg.line_of(&key("compensated")), "a subordinator cannot be compensated"));
        }
        false
    } else {
        cfg.bool_or(&key("compensated"), true)?
    };
    match kind {
        "brownian" if !subordinator => Driver::brownian(cfg.f64_or(&key("variance"), 1.0)?),
        "ig" => Driver::inverse_gaussian(cfg.f64_req(&key("delta"))?, cfg.f64_req(&key("gamma"))?, compensated),
        "poisson" => Driver::compound_poisson(cfg.f64_req(&key("rate"))?, jump_law(cfg, &key("jump"))?, compensated),
        other => return Err(config_err(line, format!("unknown {} `{other}`", if subordinator { "subordinator" } else { "driver" }))),
    }
    .map_err(at(line))
}

fn process(cfg: &ConfigMap, prefix: &str, default: f64) -> Result<VolatilityModel> {
    let key = |k: &str| format!("{prefix}.{k}");
    let Some((kind, line)) = tag(cfg, prefix) else {
        return Ok(VolatilityModel::Constant(cfg.f64_or(&key("value"), default)?));
    };
    match kind {
        "constant" => Ok(VolatilityModel::Constant(cfg.f64_req(&key("value"))?)),
        "tabulated" => {
            let times = cfg.list_f64(&key("times"))?.ok_or_else(|| config_err(line, format!("`{prefix}` needs `{}`", key("times"))))?;
            let values = cfg.list_f64(&key("values"))?.ok_or_else(|| config_err(line, format!("`{prefix}` needs `{}`", key("values"))))?;
            VolatilityModel::tabulated(times, values).map_err(at(line))
        }
        "ou" => {
            let rate = cfg.f64_req(&key("rate"))?;
            let tol = cfg.f64_or(&key("burn_in_tol"), 1e-3)?;
            let sub = driver(cfg, &key("subordinator"), true)?;
            VolatilityModel::ou_subordinator(rate, sub, tol).map_err(at(line))
        }
        other => Err(config_err(line, format!("unknown process `{other}`"))),
    }
}

fn count_from_extent(cfg: &ConfigMap, count_key: &str, extent_key: &str, step: f64) -> Result<usize> {
    if let Some(n) = cfg.usize_opt(count_key)? {
        if cfg.contains(extent_key) {
            return Err(config_err(cfg.line_of(extent_key), format!("set either `{count_key}` or `{extent_key}`, not both")));
        }
        return Ok(n);
    }
    let Some(extent) = cfg.f64_opt(extent_key)? else {
        return Err(config_err(0, format!("missing `{count_key}` (or `{extent_key}`)")));
    };
    let ratio = extent / step;
    let n = ratio.round();
    if !(n >= 0.0) || (ratio - n).abs() > 1e-9 * n.max(1.0) {
        return Err(config_err(cfg.line_of(extent_key), format!("`{extent_key}` = {extent} is not a multiple of the step {step}")));
    }
    Ok(n as usize)
}

fn grid(cfg: &ConfigMap) -> Result<GridSpec> {
    let t0 = cfg.f64_or("grid.t0", 0.0)?;
    let dt = cfg.f64_req("grid.dt")?;
    let dx = cfg.f64_or("grid.dx", dt)?;
    // span of t rather than end point so t0 + NΔt reproduces it
    let steps = match cfg.f64_opt("grid.t_end")? {
        Some(t_end) if !cfg.contains("grid.steps") => {
            let span = t_end - t0;
            let n = (span / dt).round();
            if !(n >= 1.0) || ((span / dt) - n).abs() > 1e-9 * n {
                return Err(config_err(cfg.line_of("grid.t_end"), format!("t_end - t0 = {span} is not a positive multiple of dt = {dt}")));
            }
            n as usize
        }
        Some(_) => return Err(config_err(cfg.line_of("grid.t_end"), "set either `grid.steps` or `grid.t_end`, not both")),
        None => cfg
            .usize_opt("grid.steps")?
            .ok_or_else(|| config_err(0, "missing `grid.steps` (or `grid.t_end`)"))?,
    };
    let nodes = if cfg.contains("grid.nodes") || cfg.contains("grid.x_max") {
        count_from_extent(cfg, "grid.nodes", "grid.x_max", dx)?
    } else {
        0
    };
    match GridSpec::new(t0, dt, steps, dx, nodes) {
        Err(Error::InvalidArgument(m)) => Err(config_err(cfg.line_of("grid.dt"), m)),
        other => other,
    }
}

fn run_section(cfg: &ConfigMap) -> Result<RunSection> {
    let paths = cfg.usize_opt("run.paths")?.unwrap_or(1);
    if paths == 0 {
        return Err(config_err(cfg.line_of("run.paths"), "run.paths must be at least 1"));
    }
    let outputs = match cfg.raw("run.outputs") {
        None => vec![Output::Boundary],
        Some((v, line)) => {
            let mut outs = v
                .split(',')
                .map(|s| s.trim().parse::<Output>().map_err(|m| config_err(line, m)))
                .collect::<Result<Vec<_>>>()?;
            outs.sort();
            outs.dedup();
            outs
        }
    };
    let out_dir = cfg.raw("run.out_dir").map_or_else(|| PathBuf::from("out"), |(v, _)| PathBuf::from(v));
    let truncation_tol = cfg.f64_or("run.truncation_tol", 1e-3)?;
    if !(truncation_tol > 0.0) {
        return Err(config_err(cfg.line_of("run.truncation_tol"), "truncation tolerance must be > 0"));
    }
    let bench_runs = cfg.usize_opt("run.bench_runs")?.unwrap_or(5);
    if bench_runs < 5 {
        return Err(config_err(cfg.line_of("run.bench_runs"), "benchmarks take the median of at least 5 runs"));
    }
    Ok(RunSection { seed: cfg.u64_opt("run.seed")?.unwrap_or(0), paths, outputs, out_dir, truncation_tol, bench_runs })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = ConfigMap::parse(text)?;
        let boundary = match cfg.raw("model.boundary") {
            None | Some(("extended_triangle", _)) => BoundaryMode::ExtendedTriangle,
            Some(("zero_at_xJ", _)) => BoundaryMode::ZeroAtXj,
            Some((other, line)) => return Err(config_err(line, format!("unknown boundary mode `{other}`"))),
        };
        let model = Model {
            level: cfg.f64_or("model.level", 0.0)?,
            drift_kernel: kernel(&cfg, "model.kernel.p", Some(Kernel::Zero))?,
            vol_kernel: kernel(&cfg, "model.kernel.g", None)?,
            drift: process(&cfg, "model.drift", 0.0)?,
            sigma: process(&cfg, "model.sigma", 1.0)?,
            driver: driver(&cfg, "model.driver", false)?,
            boundary,
        };
        let grid = grid(&cfg)?;
        let run = run_section(&cfg)?;
        cfg.reject_unused()?;
        model.validate().map_err(at(0))?;
        Ok(RunConfig { model, grid, run, hash: sha256_hex(text.as_bytes()) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FORWARD: &str = "\
# forward curve field
model.kernel.g = bjerksund
model.kernel.g.a = 1
model.kernel.g.b = 1
model.kernel.g.alpha = 0.01
model.sigma = ou
model.sigma.rate = 0.01
model.sigma.subordinator = ig
model.sigma.subordinator.delta = 15
model.sigma.subordinator.gamma = 1
model.driver = brownian
grid.dt = 0.01
grid.dx = 0.01
grid.t_end = 1
grid.x_max = 2
run.seed = 42
run.outputs = field, boundary
";

    #[test]
    fn parses_forward_curve_config() {
        let c = RunConfig::parse(FORWARD).unwrap();
        assert_eq!((c.grid.steps, c.grid.nodes), (100, 200));
        assert_eq!(c.grid.lambda(), 1.0);
        assert_eq!(c.model.vol_kernel, Kernel::bjerksund(1.0, 1.0, 0.01).unwrap());
        assert_eq!(c.model.drift_kernel, Kernel::Zero);
        assert_eq!(c.model.drift, VolatilityModel::Constant(0.0));
        assert!(matches!(c.model.sigma, VolatilityModel::OuSubordinator { rate, .. } if rate == 0.01));
        assert_eq!(c.run.outputs, vec![Output::Boundary, Output::Field]);
        assert_eq!(c.run.seed, 42);
        assert_eq!(c.run.paths, 1);
        assert_eq!(c.hash.len(), 64);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    fn err_line(text: &str) -> usize {
        match RunConfig::parse(text) {
            Err(Error::Config { line, .. }) => line,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn diagnostics_point_at_lines() {
        assert_eq!(err_line("model.kernel.g = zero\ngrid.dt = 0.1\ngrid.steps = 3\nbogus line\n"), 4);
        assert_eq!(err_line("model.kernel.g = zero\ngrid.dt = 0.1\ngrid.dt = 0.2\n"), 3);
        assert_eq!(err_line("model.kernel.g = zero\ngrid.dt = fast\ngrid.steps = 3\n"), 2);
        assert_eq!(err_line("model.kernel.g = zero\ngrid.dt = 0.1\ngrid.steps = 3\nmodel.kernel.g.colour = red\n"), 4);
        assert_eq!(err_line("model.kernel.g = fbm\nmodel.kernel.g.hurst = 1.5\ngrid.dt = 0.1\ngrid.steps = 3\n"), 1);
        assert_eq!(err_line("model.kernel.g = wavelet\ngrid.dt = 0.1\ngrid.steps = 3\n"), 1);
        assert_eq!(err_line("grid.dt = 0.1\ngrid.steps = 3\n"), 0);
    }

    #[test]
    fn cfl_violation_surfaces_as_cfl() {
        let r = RunConfig::parse("model.kernel.g = zero\ngrid.dt = 0.2\ngrid.dx = 0.1\ngrid.steps = 3\n");
        assert!(matches!(r, Err(Error::Cfl { .. })));
    }

    #[test]
    fn drivers_and_processes() {
        let text = "\
model.kernel.g = exponential
model.kernel.g.alpha = 1
model.kernel.p = regularized_fbm
model.kernel.p.hurst = 0.25
model.kernel.p.epsilon = 0.01
model.kernel.p.support = 5
model.drift = tabulated
model.drift.times = 0, 1
model.drift.values = 0, 2
model.sigma = constant
model.sigma.value = 0.5
model.driver = poisson
model.driver.rate = 3
model.driver.jump = normal
model.driver.jump.mean = 0
model.driver.jump.variance = 4
model.boundary = zero_at_xJ
grid.dt = 0.05
grid.dx = 0.1
grid.steps = 10
grid.nodes = 4
";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.model.boundary, BoundaryMode::ZeroAtXj);
        assert_eq!(c.model.driver.moments().variance, 12.0);
        assert!(c.model.driver.is_compensated());
        assert!(matches!(c.model.drift_kernel, Kernel::Truncated { .. }));
        assert_eq!(c.model.sigma, VolatilityModel::Constant(0.5));
        assert_eq!(c.grid.lambda(), 0.5);
    }

    #[test]
    fn subordinator_cannot_be_compensated() {
        let text = "\
model.kernel.g = zero
model.sigma = ou
model.sigma.rate = 1
model.sigma.subordinator = ig
model.sigma.subordinator.delta = 1
model.sigma.subordinator.gamma = 1
model.sigma.subordinator.compensated = true
grid.dt = 0.1
grid.steps = 2
";
        assert_eq!(err_line(text), 7);
    }

    #[test]
    fn extent_must_be_lattice_multiple() {
        assert_eq!(err_line("model.kernel.g = zero\ngrid.dt = 0.1\ngrid.t_end = 0.25\n"), 3);
    }
}
