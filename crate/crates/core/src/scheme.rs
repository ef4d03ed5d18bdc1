//! Explicit upwind scheme for `dY = (∂Y/∂x + α) dt + β dM`.
//!
//! The update is
//!
//! ```text
//! y_j^{n+1} = λ y_{j+1}^n + (1 - λ) y_j^n + α_j^n Δt + β_j^n ΔM^n,   λ = Δt / Δx
//! ```
//!
//! with separated coefficients `α_j^n = p(x_j) a(t_n-) + m g(x_j) σ(t_n-)` and
//! `β_j^n = g(x_j) σ(t_n-)`, where `m` is the mean rate of an uncompensated
//! driver. The boundary column `y_0^n` is the simulated Volterra process.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::drivers::{Driver, IncrementStream};
use crate::error::{Error, Result};
use crate::kernels::{truncation_horizon, Kernel};
use crate::rng::{StreamKey, LEVY};
use crate::volatility::{simulate_paths, PathPair, VolatilityModel};

/// Time/space lattice `t_n = t0 + nΔt`, `x_j = jΔx`, `n ≤ N`, `j ≤ J`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
    pub dx: f64,
    pub nodes: usize,
}

impl GridSpec {
    pub fn new(t0: f64, dt: f64, steps: usize, dx: f64, nodes: usize) -> Result<Self> {
        GridSpec { t0, dt, steps, dx, nodes }.validate()
    }

    /// Checks positivity and the CFL condition `Δt ≤ Δx`.
    pub fn validate(self) -> Result<Self> {
        if !self.t0.is_finite() {
            return Err(Error::arg(format!("t0 must be finite, got {}", self.t0)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::arg(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(Error::arg(format!("dx must be > 0, got {}", self.dx)));
        }
        if self.steps == 0 {
            return Err(Error::arg("grid needs at least one time step"));
        }
        if self.dt > self.dx {
            return Err(Error::Cfl { dt: self.dt, dx: self.dx, lambda: self.dt / self.dx });
        }
        Ok(self)
    }

    pub fn lambda(&self) -> f64 {
        self.dt / self.dx
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.dx
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.steps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BoundaryMode {
    /// Start from `J + N + 1` columns and let the valid region shrink by one
    /// column per step; exact on the `(N+1) × (J+1)` rectangle.
    #[default]
    ExtendedTriangle,
    /// Keep `J + 1` columns and pin `y_J^n` to the level `μ`.
    ZeroAtXj,
}

/// Kernels, coefficient processes and driver of the field
/// `Y(t, x) = μ + ∫ p(t-s+x) a(s-) ds + ∫ g(t-s+x) σ(s-) dL(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub level: f64,
    pub drift_kernel: Kernel,
    pub vol_kernel: Kernel,
    pub drift: VolatilityModel,
    pub sigma: VolatilityModel,
    pub driver: Driver,
    pub boundary: BoundaryMode,
}

impl Model {
    /// No drift, level 0, extended triangle boundary.
    pub fn new(vol_kernel: Kernel, sigma: VolatilityModel, driver: Driver) -> Self {
        Model {
            level: 0.0,
            drift_kernel: Kernel::Zero,
            vol_kernel,
            drift: VolatilityModel::Constant(0.0),
            sigma,
            driver,
            boundary: BoundaryMode::ExtendedTriangle,
        }
    }

    pub fn with_level(mut self, level: f64) -> Self {
        self.level = level;
        self
    }

    pub fn with_drift(mut self, kernel: Kernel, drift: VolatilityModel) -> Self {
        self.drift_kernel = kernel;
        self.drift = drift;
        self
    }

    pub fn with_boundary(mut self, boundary: BoundaryMode) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.level.is_finite() {
            return Err(Error::arg(format!("level must be finite, got {}", self.level)));
        }
        self.drift_kernel.validate()?;
        self.vol_kernel.validate()?;
        self.drift.validate()?;
        self.sigma.validate()?;
        self.driver.validate()
    }

    /// Mean rate routed from the driver into the drift coefficient.
    pub fn driver_mean(&self) -> f64 {
        self.driver.moments().mean
    }
}

/// `α = p a + m g σ`
#[inline]
pub(crate) fn alpha_coeff(p: f64, g: f64, a: f64, sigma: f64, mean: f64) -> f64 {
    p * a + mean * g * sigma
}

/// `β = g σ`
#[inline]
pub(crate) fn beta_coeff(g: f64, sigma: f64) -> f64 {
    g * sigma
}

#[inline]
fn update(lam: f64, keep: f64, right: f64, here: f64, alpha: f64, dt: f64, beta: f64, dm: f64) -> f64 {
    lam * right + keep * here + alpha * dt + beta * dm
}

/// One explicit step. The output has one entry fewer than `row`.
pub fn fd_step(row: &[f64], alpha: &[f64], beta: &[f64], dm: f64, lam: f64, dt: f64) -> Result<Vec<f64>> {
    if row.len() < 2 {
        return Err(Error::Misaligned(format!("row needs at least 2 entries, got {}", row.len())));
    }
    let out_len = row.len() - 1;
    if alpha.len() < out_len || beta.len() < out_len {
        return Err(Error::Misaligned(format!(
            "coefficient rows ({}, {}) shorter than output row {out_len}",
            alpha.len(),
            beta.len()
        )));
    }
    let keep = 1.0 - lam;
    Ok((0..out_len)
        .map(|j| update(lam, keep, row[j + 1], row[j], alpha[j], dt, beta[j], dm))
        .collect())
}

/// One Monte Carlo draw of everything random in a solve.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    /// Martingale increments `ΔM^n`.
    pub increments: IncrementStream,
    pub paths: PathPair,
}

impl Realization {
    pub fn sample(model: &Model, grid: &GridSpec, seed: u64, index: u64) -> Result<Self> {
        model.validate()?;
        let grid = grid.validate()?;
        let increments = model
            .driver
            .martingale()
            .sample_increments(grid.dt, grid.steps, seed, StreamKey::new(LEVY, index))?;
        let paths = simulate_paths(&model.sigma, &model.drift, &grid, seed, index)?;
        Ok(Realization { increments, paths })
    }

    /// The same randomness seen on a grid `factor` times coarser: increments
    /// are summed in blocks and the paths are read at every `factor`-th time.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.increments.len() % factor != 0 {
            return Err(Error::arg(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.increments.len()
            )));
        }
        let mut increments = self.increments.clone();
        increments.dt = self.increments.dt * factor as f64;
        increments.values = self.increments.values.chunks(factor).map(|c| c.iter().sum()).collect();
        let pick = |v: &[f64]| v.iter().step_by(factor).copied().collect::<Vec<f64>>();
        let paths = PathPair {
            times: pick(&self.paths.times),
            drift: pick(&self.paths.drift),
            sigma: pick(&self.paths.sigma),
            ..self.paths.clone()
        };
        Ok(Realization { increments, paths })
    }

    fn check(&self, grid: &GridSpec) -> Result<()> {
        if self.increments.len() < grid.steps || self.paths.len() < grid.steps {
            return Err(Error::Misaligned(format!(
                "realization has {} increments and {} path points for {} steps",
                self.increments.len(),
                self.paths.len(),
                grid.steps
            )));
        }
        Ok(())
    }
}

/// How much of the field to keep in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Retention {
    /// Every computed cell including the auxiliary triangle.
    Full,
    /// The `(N+1) × (J+1)` rectangle.
    #[default]
    Rectangle,
    /// Only `y_0^n`.
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    pub retention: Retention,
    /// Truncation tolerance checked against `x_J` in `ZeroAtXj` mode.
    pub truncation_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { retention: Retention::Rectangle, truncation_tol: 1e-3 }
    }
}

/// Solved values `y_j^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub grid: GridSpec,
    pub mode: BoundaryMode,
    pub retention: Retention,
    cols: usize,
    values: Vec<f64>,
    computed: Vec<bool>,
    pub seed: u64,
    pub index: u64,
    pub warnings: Vec<String>,
}

impl Field {
    pub fn rows(&self) -> usize {
        self.grid.steps + 1
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `y_j^n`, if retained and computed.
    pub fn get(&self, n: usize, j: usize) -> Option<f64> {
        if n >= self.rows() || j >= self.cols {
            return None;
        }
        let k = n * self.cols + j;
        self.computed[k].then(|| self.values[k])
    }

    /// Retained row `n`; cells outside the valid triangle are NaN.
    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.cols..(n + 1) * self.cols]
    }

    pub fn is_computed(&self, n: usize, j: usize) -> bool {
        n < self.rows() && j < self.cols && self.computed[n * self.cols + j]
    }

    pub fn boundary(&self) -> Vec<f64> {
        (0..self.rows()).map(|n| self.values[n * self.cols]).collect()
    }

    /// Columns `0..=J` of row `n`.
    pub fn rectangle_row(&self, n: usize) -> &[f64] {
        let w = (self.grid.nodes + 1).min(self.cols);
        &self.row(n)[..w]
    }

    /// Header row of x-values, then `t, y_0, …, y_J` per time step.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let width = (self.grid.nodes + 1).min(self.cols);
        write!(w, "t\\x")?;
        for j in 0..width {
            write!(w, ",{:.16e}", self.grid.x(j))?;
        }
        writeln!(w)?;
        for n in 0..self.rows() {
            write!(w, "{:.16e}", self.grid.time(n))?;
            for v in &self.row(n)[..width] {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// 32-byte header (magic, N: u32, J: u32, Δt, Δx; little endian)
    /// followed by the rectangle as row-major f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let width = (self.grid.nodes + 1).min(self.cols);
        w.write_all(FIELD_MAGIC)?;
        w.write_all(&(self.grid.steps as u32).to_le_bytes())?;
        w.write_all(&((width - 1) as u32).to_le_bytes())?;
        w.write_all(&self.grid.dt.to_le_bytes())?;
        w.write_all(&self.grid.dx.to_le_bytes())?;
        for n in 0..self.rows() {
            for v in &self.row(n)[..width] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

const FIELD_MAGIC: &[u8; 8] = b"HSPDEFLD";

/// Contents of a binary field dump.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldDump {
    pub steps: usize,
    pub nodes: usize,
    pub dt: f64,
    pub dx: f64,
    /// `(steps + 1) × (nodes + 1)`, row-major.
    pub values: Vec<f64>,
}

pub fn read_field_binary<R: Read>(mut r: R) -> Result<FieldDump> {
    let mut header = [0u8; 32];
    r.read_exact(&mut header)?;
    if &header[..8] != FIELD_MAGIC {
        return Err(Error::Format("not a field dump".into()));
    }
    let steps = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let nodes = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let dt = f64::from_le_bytes(header[16..24].try_into().unwrap());
    let dx = f64::from_le_bytes(header[24..32].try_into().unwrap());
    let count = (steps + 1) * (nodes + 1);
    let mut values = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b)?;
        values.push(f64::from_le_bytes(b));
    }
    Ok(FieldDump { steps, nodes, dt, dx, values })
}

/// `k(x_j)` for `j < count`.
pub(crate) fn tabulate(kernel: &Kernel, count: usize, dx: f64) -> Result<Vec<f64>> {
    (0..count).map(|j| kernel.eval(j as f64 * dx)).collect()
}

/// Number of columns marched: `J + N + 1` or `J + 1`.
fn march_width(mode: BoundaryMode, grid: &GridSpec) -> usize {
    match mode {
        BoundaryMode::ExtendedTriangle => grid.nodes + grid.steps + 1,
        BoundaryMode::ZeroAtXj => grid.nodes + 1,
    }
}

/// Samples a realization for path `index` and solves it.
pub fn solve(model: &Model, grid: &GridSpec, seed: u64, index: u64, options: SolveOptions) -> Result<Field> {
    let realization = Realization::sample(model, grid, seed, index)?;
    solve_with(model, grid, &realization, options)
}

/// Solves the scheme on a given realization.
pub fn solve_with(model: &Model, grid: &GridSpec, realization: &Realization, options: SolveOptions) -> Result<Field> {
    model.validate()?;
    let grid = grid.validate()?;
    realization.check(&grid)?;
    let mode = model.boundary;
    if mode == BoundaryMode::ZeroAtXj && grid.nodes == 0 {
        return Err(Error::arg("zero_at_xJ needs at least one interior node (J >= 1)"));
    }

    let mut warnings = Vec::new();
    if mode == BoundaryMode::ZeroAtXj {
        let x_j = grid.x(grid.nodes);
        match truncation_horizon(&model.drift_kernel, &model.vol_kernel, options.truncation_tol) {
            Ok(r) if r <= x_j => {}
            Ok(r) => warnings.push(format!(
                "x_J = {x_j} is below the truncation horizon {r} for tolerance {}; the pinned boundary biases the field",
                options.truncation_tol
            )),
            Err(e) => warnings.push(format!("cannot verify the pinned boundary at x_J = {x_j}: {e}")),
        }
    }

    let width = march_width(mode, &grid);
    let g = tabulate(&model.vol_kernel, width, grid.dx)?;
    let p = tabulate(&model.drift_kernel, width, grid.dx)?;
    let mean = model.driver_mean();
    let lam = grid.lambda();
    let keep = 1.0 - lam;
    let dt = grid.dt;

    let rows = grid.steps + 1;
    let cols = match options.retention {
        Retention::Full => width,
        Retention::Rectangle => grid.nodes + 1,
        Retention::Boundary => 1,
    };
    let mut values = vec![f64::NAN; rows * cols];
    let mut computed = vec![false; rows * cols];
    let mut store = |n: usize, row: &[f64], valid: usize| {
        let w = valid.min(cols);
        values[n * cols..n * cols + w].copy_from_slice(&row[..w]);
        computed[n * cols..n * cols + w].iter_mut().for_each(|c| *c = true);
    };

    let mut row = vec![model.level; width];
    store(0, &row, width);
    let mut alpha = vec![0.0; width];
    let mut beta = vec![0.0; width];
    for n in 0..grid.steps {
        let a = realization.paths.drift[n];
        let s = realization.paths.sigma[n];
        let dm = realization.increments.values[n];
        // after the step, columns 0..out are valid
        let out = match mode {
            BoundaryMode::ExtendedTriangle => width - n - 1,
            BoundaryMode::ZeroAtXj => width - 1,
        };
        for j in 0..out {
            alpha[j] = alpha_coeff(p[j], g[j], a, s, mean);
            beta[j] = beta_coeff(g[j], s);
        }
        // ascending j reads row[j + 1] before it is overwritten
        for j in 0..out {
            row[j] = update(lam, keep, row[j + 1], row[j], alpha[j], dt, beta[j], dm);
        }
        let valid = match mode {
            BoundaryMode::ExtendedTriangle => out,
            BoundaryMode::ZeroAtXj => {
                row[width - 1] = model.level;
                width
            }
        };
        store(n + 1, &row, valid);
    }

    Ok(Field {
        grid,
        mode,
        retention: options.retention,
        cols,
        values,
        computed,
        seed: realization.increments.seed,
        index: realization.increments.index,
        warnings,
    })
}

/// Solves `paths` independent Monte Carlo paths in parallel.
pub fn solve_ensemble(model: &Model, grid: &GridSpec, seed: u64, paths: usize, options: SolveOptions) -> Result<Vec<Field>> {
    (0..paths as u64)
        .into_par_iter()
        .map(|i| solve(model, grid, seed, i, options))
        .collect()
}

/// Binomial weights `C(m, k) λ^k (1-λ)^{m-k}`, `k = 0..=m`.
pub fn binomial_weights(m: usize, lam: f64) -> Vec<f64> {
    let mut w = vec![0.0; m + 1];
    if lam == 1.0 {
        w[m] = 1.0;
        return w;
    }
    if lam == 0.0 {
        w[0] = 1.0;
        return w;
    }
    let first = (1.0 - lam).powi(m as i32);
    let ratio = lam / (1.0 - lam);
    if first.is_normal() {
        w[0] = first;
        for k in 0..m {
            w[k + 1] = w[k] * ((m - k) as f64 / (k + 1) as f64) * ratio;
        }
    } else {
        // (1-λ)^m underflows: recur outward from the mode, then normalize
        let mode = (((m + 1) as f64) * lam).floor().min(m as f64) as usize;
        w[mode] = 1.0;
        for k in mode..m {
            w[k + 1] = w[k] * ((m - k) as f64 / (k + 1) as f64) * ratio;
        }
        for k in (0..mode).rev() {
            w[k] = w[k + 1] * ((k + 1) as f64 / (m - k) as f64) / ratio;
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
    }
    w
}

/// `T^m f(x_k) = Σ_i C(m,i) λ^i (1-λ)^{m-i} f(x_{k+i})` for the operator
/// `T = I + Δt (S(Δx) - I) / Δx` on a function tabulated at `x_j = jΔx`.
pub fn apply_t_power(f: &[f64], m: usize, dx: f64, dt: f64, k: usize) -> Result<f64> {
    let lam = dt / dx;
    if !(lam > 0.0 && lam <= 1.0) {
        return Err(Error::Cfl { dt, dx, lambda: lam });
    }
    if k + m >= f.len() {
        return Err(Error::arg(format!(
            "T^{m} at node {k} needs the function tabulated to node {}, have {}",
            k + m,
            f.len()
        )));
    }
    Ok(weighted(&binomial_weights(m, lam), &f[k..=k + m]))
}

fn weighted(w: &[f64], f: &[f64]) -> f64 {
    w.iter().zip(f).map(|(w, f)| w * f).sum()
}

/// One application of `T`: `(Tf)_j = f_j + λ (f_{j+1} - f_j)`.
pub fn apply_t_once(f: &[f64], lam: f64) -> Vec<f64> {
    f.windows(2).map(|w| w[0] + lam * (w[1] - w[0])).collect()
}

/// Evaluates
/// `y_j^n = T^n y⁰_j + Σ_i T^{n-1-i} α^i_j Δt + Σ_i T^{n-1-i} β^i_j ΔM^i`
/// directly from the realization.
pub fn representation_sum(model: &Model, grid: &GridSpec, realization: &Realization, n: usize, j: usize) -> Result<f64> {
    model.validate()?;
    let grid = grid.validate()?;
    realization.check(&grid)?;
    if model.boundary != BoundaryMode::ExtendedTriangle {
        return Err(Error::Unsupported("the operator representation holds without a pinned boundary only".into()));
    }
    if n > grid.steps || j > grid.nodes {
        return Err(Error::arg(format!("cell ({n}, {j}) outside the {}x{} grid", grid.steps, grid.nodes)));
    }
    let lam = grid.lambda();
    let g = tabulate(&model.vol_kernel, j + n + 1, grid.dx)?;
    let p = tabulate(&model.drift_kernel, j + n + 1, grid.dx)?;
    let mean = model.driver_mean();

    let y0 = vec![model.level; n + 1];
    let mut total = weighted(&binomial_weights(n, lam), &y0);
    for i in 0..n {
        let a = realization.paths.drift[i];
        let s = realization.paths.sigma[i];
        let m = n - 1 - i;
        let w = binomial_weights(m, lam);
        let alpha: Vec<f64> = (j..=j + m).map(|c| alpha_coeff(p[c], g[c], a, s, mean)).collect();
        let beta: Vec<f64> = (j..=j + m).map(|c| beta_coeff(g[c], s)).collect();
        total += weighted(&w, &alpha) * grid.dt + weighted(&w, &beta) * realization.increments.values[i];
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volatility::VolatilityModel;

    fn brownian_model(g: Kernel) -> Model {
        Model::new(g, VolatilityModel::Constant(1.0), Driver::brownian(1.0).unwrap())
    }

    #[test]
    fn cfl_gate() {
        let g = GridSpec::new(0.0, 0.01, 100, 0.01, 200).unwrap();
        assert_eq!(g.lambda(), 1.0);
        assert!(matches!(GridSpec::new(0.0, 0.02, 10, 0.01, 5), Err(Error::Cfl { lambda, .. }) if lambda == 2.0));
        assert_eq!(GridSpec::new(0.0, 0.005, 10, 0.01, 5).unwrap().lambda(), 0.5);
        assert!(GridSpec::new(0.0, 0.0, 10, 0.01, 5).is_err());
        assert!(GridSpec::new(0.0, 0.01, 0, 0.01, 5).is_err());
    }

    #[test]
    fn affine_index_maps() {
        let g = GridSpec::new(0.5, 0.1, 1000, 0.1, 1000).unwrap();
        assert_eq!(g.time(1000), 0.5 + 1000.0 * 0.1);
        assert_eq!(g.x(333), 333.0 * 0.1);
    }

    #[test]
    fn step_transports_at_unit_ratio() {
        let row = [1.0, 2.0, 3.0, 4.0];
        let out = fd_step(&row, &[0.0; 3], &[0.0; 3], 0.7, 1.0, 0.1).unwrap();
        assert_eq!(out, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn step_adds_noise() {
        let out = fd_step(&[2.0; 5], &[0.0; 4], &[1.0; 4], 0.3, 1.0, 0.01).unwrap();
        assert!(out.iter().all(|v| (v - 2.3).abs() < 1e-15));
    }

    #[test]
    fn step_convex_combination() {
        let out = fd_step(&[0.0, 1.0], &[0.0], &[0.0], 0.0, 0.5, 0.01).unwrap();
        assert_eq!(out, vec![0.5]);
    }

    #[test]
    fn step_rejects_misaligned_rows() {
        assert!(fd_step(&[1.0], &[], &[], 0.0, 1.0, 0.1).is_err());
        assert!(fd_step(&[1.0, 2.0, 3.0], &[0.0], &[0.0, 0.0], 0.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn zero_kernels_give_constant_field() {
        let g = GridSpec::new(0.0, 0.05, 20, 0.1, 10).unwrap();
        let m = brownian_model(Kernel::Zero).with_level(0.0);
        let f = solve(&m, &g, 3, 0, SolveOptions::default()).unwrap();
        for n in 0..f.rows() {
            assert!(f.rectangle_row(n).iter().all(|v| *v == 0.0));
        }
        let m = brownian_model(Kernel::Zero).with_level(2.5);
        let f = solve(&m, &g, 3, 0, SolveOptions::default()).unwrap();
        assert!(f.boundary().iter().all(|v| *v == 2.5));
    }

    #[test]
    fn rectangle_shape_and_triangle_mask() {
        let g = GridSpec::new(0.0, 0.01, 100, 0.01, 200).unwrap();
        let m = brownian_model(Kernel::bjerksund(1.0, 1.0, 0.01).unwrap());
        let f = solve(&m, &g, 1, 0, SolveOptions::default()).unwrap();
        assert_eq!((f.rows(), f.cols()), (101, 201));
        assert!((0..101).all(|n| (0..201).all(|j| f.is_computed(n, j))));

        let full = solve(&m, &g, 1, 0, SolveOptions { retention: Retention::Full, ..Default::default() }).unwrap();
        assert_eq!(full.cols(), 301);
        assert!(full.is_computed(0, 300));
        assert!(!full.is_computed(1, 300));
        assert!(full.is_computed(100, 200));
        assert!(!full.is_computed(100, 201));
        for n in 0..=100 {
            assert_eq!(full.rectangle_row(n), f.row(n));
        }
    }

    #[test]
    fn pure_transport_is_exact() {
        // λ = 1 and zero coefficients: y_j^n = y_{j+n}^0 = μ, plus the
        // full-field shift with non-constant data via fd_step
        let mut row: Vec<f64> = (0..40).map(|j| (j as f64 * 0.37).sin()).collect();
        let original = row.clone();
        for n in 1..20 {
            row = fd_step(&row, &vec![0.0; 40], &vec![0.0; 40], 0.0, 1.0, 0.1).unwrap();
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, original[j + n]);
            }
        }
    }

    #[test]
    fn pinned_boundary_mode() {
        let g = GridSpec::new(0.0, 0.01, 50, 0.01, 30).unwrap();
        let m = brownian_model(Kernel::exponential(1.0).unwrap())
            .with_boundary(BoundaryMode::ZeroAtXj)
            .with_level(0.25);
        let f = solve(&m, &g, 2, 0, SolveOptions::default()).unwrap();
        assert_eq!(f.cols(), 31);
        assert!((0..=50).all(|n| f.get(n, 30) == Some(0.25)));
        // x_J = 0.3 is far below the horizon of e^{-u} at tolerance 1e-3
        assert_eq!(f.warnings.len(), 1);

        let wide = GridSpec::new(0.0, 0.01, 5, 0.01, 800).unwrap();
        let f = solve(&m, &wide, 2, 0, SolveOptions::default()).unwrap();
        assert!(f.warnings.is_empty(), "{:?}", f.warnings);
    }

    #[test]
    fn singular_kernel_rejected() {
        let g = GridSpec::new(0.0, 0.01, 5, 0.01, 5).unwrap();
        let m = brownian_model(Kernel::power_fbm(0.3).unwrap());
        assert!(matches!(solve(&m, &g, 1, 0, SolveOptions::default()), Err(Error::Singularity { .. })));
        let m = brownian_model(Kernel::regularized_fbm(0.3, 0.01).unwrap());
        assert!(solve(&m, &g, 1, 0, SolveOptions::default()).is_ok());
    }

    #[test]
    fn binomial_weights_sum_to_one() {
        for lam in [0.25, 0.5, 0.9, 1.0] {
            for m in [0, 1, 7, 64, 2000] {
                let s: f64 = binomial_weights(m, lam).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "m {m} lam {lam}: {s}");
            }
        }
    }

    #[test]
    fn t_power_special_cases() {
        let f: Vec<f64> = (0..20).map(|j| (j as f64).powi(2) - 3.0).collect();
        assert_eq!(apply_t_power(&f, 5, 0.1, 0.1, 2).unwrap(), f[7]);
        assert_eq!(apply_t_power(&f, 0, 0.1, 0.05, 4).unwrap(), f[4]);
        assert!(apply_t_power(&f, 19, 0.1, 0.05, 1).is_err());
        assert!(apply_t_power(&f, 2, 0.1, 0.2, 1).is_err());
    }

    #[test]
    fn t_power_of_identity_function() {
        // f(u) = u: T^m f(x) = x + mλΔx = x + mΔt
        let (dx, dt) = (0.1, 0.03);
        let f: Vec<f64> = (0..50).map(|j| j as f64 * dx).collect();
        for m in [1usize, 4, 17, 40] {
            for k in [0usize, 3, 9] {
                if k + m < f.len() {
                    let v = apply_t_power(&f, m, dx, dt, k).unwrap();
                    assert!((v - (k as f64 * dx + m as f64 * dt)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn representation_special_cases() {
        let g = GridSpec::new(0.0, 0.05, 6, 0.1, 4).unwrap();
        let m = brownian_model(Kernel::exponential(0.8).unwrap())
            .with_level(1.5)
            .with_drift(Kernel::exponential(0.3).unwrap(), VolatilityModel::Constant(0.4));
        let r = Realization::sample(&m, &g, 5, 0).unwrap();
        for j in 0..=4 {
            assert_eq!(representation_sum(&m, &g, &r, 0, j).unwrap(), 1.5);
        }
        let f = solve_with(&m, &g, &r, SolveOptions::default()).unwrap();
        for j in 0..=4 {
            let lam = g.lambda();
            let alpha = alpha_coeff(m.drift_kernel.eval(g.x(j)).unwrap(), 0.0, 0.4, 1.0, 0.0);
            let beta = m.vol_kernel.eval(g.x(j)).unwrap();
            let unrolled = lam * 1.5 + (1.0 - lam) * 1.5 + alpha * g.dt + beta * r.increments.values[0];
            assert!((representation_sum(&m, &g, &r, 1, j).unwrap() - unrolled).abs() < 1e-14);
            assert!((f.get(1, j).unwrap() - unrolled).abs() < 1e-14);
        }
        let pinned = m.clone().with_boundary(BoundaryMode::ZeroAtXj);
        assert!(representation_sum(&pinned, &g, &r, 2, 0).is_err());
    }

    #[test]
    fn uncompensated_driver_routes_mean_into_drift() {
        // L = M + m t: solving with the raw IG driver equals solving with the
        // martingale part plus drift m g σ
        let g = GridSpec::new(0.0, 0.01, 30, 0.02, 10).unwrap();
        let raw = Model::new(
            Kernel::exponential(0.5).unwrap(),
            VolatilityModel::Constant(0.8),
            Driver::inverse_gaussian(2.0, 1.5, false).unwrap(),
        );
        let r = Realization::sample(&raw, &g, 8, 0).unwrap();
        let f = solve_with(&raw, &g, &r, SolveOptions::default()).unwrap();
        // recompute with raw increments ΔL = ΔM + mΔt and no routed drift
        let mean = raw.driver.moments().mean;
        let mut compensated = raw.clone();
        compensated.driver = raw.driver.martingale();
        let mut shifted = r.clone();
        shifted.increments.values.iter_mut().for_each(|v| *v += mean * g.dt);
        let h = solve_with(&compensated, &g, &shifted, SolveOptions::default()).unwrap();
        for n in 0..=30 {
            for j in 0..=10 {
                assert!((f.get(n, j).unwrap() - h.get(n, j).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coarsened_realization_keeps_totals() {
        let m = brownian_model(Kernel::exponential(1.0).unwrap());
        let fine = GridSpec::new(0.0, 0.01, 40, 0.01, 0).unwrap();
        let r = Realization::sample(&m, &fine, 4, 0).unwrap();
        let c = r.coarsen(4).unwrap();
        assert_eq!(c.increments.len(), 10);
        assert_eq!(c.paths.len(), 11);
        assert!((c.increments.values.iter().sum::<f64>() - r.increments.values.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(c.paths.times[3], r.paths.times[12]);
        assert!(r.coarsen(3).is_err());
        let coarse = GridSpec::new(0.0, 0.04, 10, 0.04, 0).unwrap();
        assert!(solve_with(&m, &coarse, &c, SolveOptions::default()).is_ok());
    }

    #[test]
    fn field_dumps() {
        let g = GridSpec::new(0.0, 0.25, 3, 0.5, 2).unwrap();
        let m = brownian_model(Kernel::exponential(1.0).unwrap());
        let f = solve(&m, &g, 1, 0, SolveOptions::default()).unwrap();
        let mut csv = Vec::new();
        f.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "t\\x,0.0000000000000000e0,5.0000000000000000e-1,1.0000000000000000e0");
        let parsed: Vec<f64> = lines[2].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(parsed[0], 0.25);
        assert_eq!(&parsed[1..], f.row(1));

        let mut bin = Vec::new();
        f.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 32 + 4 * 3 * 8);
        let dump = read_field_binary(&bin[..]).unwrap();
        assert_eq!((dump.steps, dump.nodes, dump.dt, dump.dx), (3, 2, 0.25, 0.5));
        assert_eq!(&dump.values[3..6], f.row(1));
    }
}
