//! Independent references for the scheme: re-integration of the Volterra
//! sums, the exact OU recursion, closed-form moments, the truncation error
//! and the a-priori error budget.

use rayon::prelude::*;

use crate::drivers::{mean_and_stderr, Driver, IncrementStream};
use crate::error::{Error, Result};
use crate::kernels::{tail_norms, Kernel, TailNorms};
use crate::quad::{self, DEFAULT_REL_TOL};
use crate::rng::{StreamKey, SUBORDINATOR};
use crate::scheme::{
    alpha_coeff, beta_coeff, binomial_weights, solve_with, BoundaryMode, GridSpec, Model, Realization, Retention,
    SolveOptions,
};
use crate::volatility::{Role, VolatilityModel};

fn check_cell(grid: &GridSpec, realization: &Realization, n: usize) -> Result<()> {
    if n > grid.steps {
        return Err(Error::arg(format!("time index {n} beyond N = {}", grid.steps)));
    }
    if realization.increments.len() < n || realization.paths.len() < n {
        return Err(Error::Misaligned(format!("realization too short for time index {n}")));
    }
    Ok(())
}

/// `μ + Σ_i p(u_i) a(t_i-) Δt + Σ_i g(u_i) σ(t_i-) ΔM^i` with
/// `u_i = t_n - t_{i+1} + x`, plus the routed driver mean when the driver is
/// not centered. Accumulates in the same order as the scheme.
fn numint_with(model: &Model, grid: &GridSpec, r: &Realization, n: usize, arg: impl Fn(usize) -> f64) -> Result<f64> {
    let mean = model.driver_mean();
    let mut acc = model.level;
    for i in 0..n {
        let u = arg(n - 1 - i);
        let g = model.vol_kernel.eval(u)?;
        let p = model.drift_kernel.eval(u)?;
        let s = r.paths.sigma[i];
        acc = acc + alpha_coeff(p, g, r.paths.drift[i], s, mean) * grid.dt + beta_coeff(g, s) * r.increments.values[i];
    }
    Ok(acc)
}

/// Direct numerical integration of `Y(t_n)(x)`.
pub fn numint_value(model: &Model, grid: &GridSpec, realization: &Realization, n: usize, x: f64) -> Result<f64> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::arg(format!("offset must be >= 0, got {x}")));
    }
    check_cell(grid, realization, n)?;
    numint_with(model, grid, realization, n, |m| m as f64 * grid.dt + x)
}

/// `numint_value` at the lattice node `x_j`. On `Δt = Δx` grids the kernel
/// argument is formed as `(m + j) Δx`, exactly as the scheme tabulates it.
pub fn numint_node(model: &Model, grid: &GridSpec, realization: &Realization, n: usize, j: usize) -> Result<f64> {
    check_cell(grid, realization, n)?;
    if grid.dt == grid.dx {
        numint_with(model, grid, realization, n, |m| (m + j) as f64 * grid.dx)
    } else {
        numint_with(model, grid, realization, n, |m| m as f64 * grid.dt + grid.x(j))
    }
}

/// The `(N+1) × (J+1)` rectangle, every cell re-integrated independently.
pub fn numint_field(model: &Model, grid: &GridSpec, realization: &Realization) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity((grid.steps + 1) * (grid.nodes + 1));
    for n in 0..=grid.steps {
        for j in 0..=grid.nodes {
            out.push(numint_node(model, grid, realization, n, j)?);
        }
    }
    Ok(out)
}

/// Exact OU recursion `X_{n+1} = e^{-αΔt} X_n + σ √v η_n`, `X_0 = 0`,
/// `η_n ~ N(0, (1 - e^{-2αΔt}) / 2α)`, driven by the standard normals
/// `ΔM^n / √(vΔt)` behind a Brownian increment stream.
pub fn exact_ou_path(alpha: f64, sigma: f64, driver: &Driver, increments: &IncrementStream) -> Result<Vec<f64>> {
    let Driver::Brownian { variance_rate } = *driver else {
        return Err(Error::Unsupported(format!("exact OU paths need a Brownian driver, got {driver:?}")));
    };
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::arg(format!("OU decay must be >= 0, got {alpha}")));
    }
    let dt = increments.dt;
    let var = if alpha == 0.0 { dt } else { -(-2.0 * alpha * dt).exp_m1() / (2.0 * alpha) };
    let decay = (-alpha * dt).exp();
    let scale = sigma * variance_rate.sqrt() * var.sqrt();
    let to_normal = 1.0 / (variance_rate * dt).sqrt();
    let mut x = 0.0;
    let mut out = Vec::with_capacity(increments.len() + 1);
    out.push(x);
    for dm in &increments.values {
        x = decay * x + scale * (dm * to_normal);
        out.push(x);
    }
    Ok(out)
}

fn integrate_pieces<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, breaks: &[f64]) -> Result<f64> {
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|c| *c > a && *c < b).collect();
    cuts.sort_by(f64::total_cmp);
    let mut lo = a;
    let mut total = 0.0;
    for hi in cuts.into_iter().chain(std::iter::once(b)) {
        total += quad::integrate(&f, lo, hi, DEFAULT_REL_TOL)?.value;
        lo = hi;
    }
    Ok(total)
}

fn eval_or_nan(k: &Kernel, u: f64) -> f64 {
    k.eval(u).unwrap_or(f64::NAN)
}

/// First two moments of `X(t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub t: f64,
    pub mean: f64,
    pub second_moment: f64,
}

impl Moments {
    pub fn variance(&self) -> f64 {
        self.second_moment - self.mean * self.mean
    }

    pub fn to_text(&self) -> String {
        format!(
            "t: {:.16e}\nmean: {:.16e}\nsecond_moment: {:.16e}\nvariance: {:.16e}\n",
            self.t,
            self.mean,
            self.second_moment,
            self.variance()
        )
    }
}

/// `E[X(t)]` and `E[X(t)²]` for the process started at `t0` with zero history:
///
/// ```text
/// E[X]  = μ + ∫₀^h p(u) E[a(t-u)] du + m ∫₀^h g(u) σ(t-u) du
/// E[X²] = E[X]² + Var ∫₀^h p(u) a(t-u) du + C₁ ∫₀^h g(u)² E[σ(t-u)²] du
/// ```
///
/// with `h = t - t0`. A non-centered driver (`m ≠ 0`) needs a deterministic σ.
pub fn moments_formula(model: &Model, t0: f64, t: f64) -> Result<Moments> {
    model.validate()?;
    let h = t - t0;
    if !(h >= 0.0 && h.is_finite()) {
        return Err(Error::arg(format!("moment time {t} precedes the start {t0}")));
    }
    let mut p_breaks = model.drift_kernel.breakpoints();
    let mut g_breaks = model.vol_kernel.breakpoints();
    for (model_path, breaks) in [(&model.drift, &mut p_breaks), (&model.sigma, &mut g_breaks)] {
        if let VolatilityModel::Tabulated { times, .. } = model_path {
            breaks.extend(times.iter().map(|s| t - s));
        }
    }
    let moments = model.driver.moments();

    let mut mean = model.level;
    let mut drift_var = 0.0;
    if !model.drift_kernel.is_zero() {
        mean += integrate_pieces(
            |u| eval_or_nan(&model.drift_kernel, u) * model.drift.mean_at(Role::Drift, t - u).unwrap_or(f64::NAN),
            0.0,
            h,
            &p_breaks,
        )?;
        if let VolatilityModel::OuSubordinator { rate, .. } = &model.drift {
            // Var ∫∫ p(u) p(v) e^{-λ|u-v|} du dv, folded onto v < u
            let (_, var) = model.drift.stationary_moments()?;
            let inner = |u: f64| {
                let f = |v: f64| eval_or_nan(&model.drift_kernel, v) * (-rate * (u - v)).exp();
                integrate_pieces(f, 0.0, u, &p_breaks).unwrap_or(f64::NAN)
            };
            let outer = |u: f64| eval_or_nan(&model.drift_kernel, u) * inner(u);
            drift_var = 2.0 * var * integrate_pieces(outer, 0.0, h, &p_breaks)?;
        }
    }
    if moments.mean != 0.0 && !model.vol_kernel.is_zero() {
        if !model.sigma.is_deterministic() {
            return Err(Error::Unsupported(
                "moments of a non-centered driver with stochastic volatility need E[σ(s)σ(r)]".into(),
            ));
        }
        mean += moments.mean
            * integrate_pieces(
                |u| eval_or_nan(&model.vol_kernel, u) * model.sigma.mean_at(Role::Volatility, t - u).unwrap_or(f64::NAN),
                0.0,
                h,
                &g_breaks,
            )?;
    }
    let noise = if model.vol_kernel.is_zero() {
        0.0
    } else {
        moments.variance
            * integrate_pieces(
                |u| {
                    let g = eval_or_nan(&model.vol_kernel, u);
                    g * g * model.sigma.second_moment_at(Role::Volatility, t - u).unwrap_or(f64::NAN)
                },
                0.0,
                h,
                &g_breaks,
            )?
    };
    Ok(Moments { t, mean, second_moment: mean * mean + drift_var + noise })
}

/// Moments of the scheme's own boundary value `y_0^N`, from the operator
/// representation: the lattice counterpart of `moments_formula`, which the
/// Monte Carlo average of solves converges to. The OU drift uses the
/// continuous-time autocovariance at lattice lags.
pub fn scheme_moments(model: &Model, grid: &GridSpec) -> Result<Moments> {
    model.validate()?;
    let grid = grid.validate()?;
    let n = grid.steps;
    let lam = grid.lambda();
    let g = crate::scheme::tabulate(&model.vol_kernel, n + 1, grid.dx)?;
    let p = crate::scheme::tabulate(&model.drift_kernel, n + 1, grid.dx)?;
    let driver = model.driver.moments();
    if driver.mean != 0.0 && !model.sigma.is_deterministic() && !model.vol_kernel.is_zero() {
        return Err(Error::Unsupported(
            "moments of a non-centered driver with stochastic volatility need E[σ(s)σ(r)]".into(),
        ));
    }
    let dot = |w: &[f64], f: &[f64]| w.iter().zip(f).map(|(w, f)| w * f).sum::<f64>();
    let mut mean = model.level;
    let mut noise = 0.0;
    let mut drift_w = vec![0.0; n];
    for i in 0..n {
        let m = n - 1 - i;
        let w = binomial_weights(m, lam);
        let tp = dot(&w, &p[..=m]);
        let tg = dot(&w, &g[..=m]);
        let t = grid.time(i);
        if tp != 0.0 {
            mean += tp * model.drift.mean_at(Role::Drift, t)? * grid.dt;
        }
        if driver.mean != 0.0 && tg != 0.0 {
            mean += driver.mean * tg * model.sigma.mean_at(Role::Volatility, t)? * grid.dt;
        }
        noise += driver.variance * tg * tg * model.sigma.second_moment_at(Role::Volatility, t)? * grid.dt;
        drift_w[i] = tp * grid.dt;
    }
    let mut drift_var = 0.0;
    if let VolatilityModel::OuSubordinator { rate, .. } = &model.drift {
        let (_, var) = model.drift.stationary_moments()?;
        for i in 0..n {
            for k in 0..n {
                let lag = i.abs_diff(k) as f64 * grid.dt;
                drift_var += var * drift_w[i] * drift_w[k] * (-rate * lag).exp();
            }
        }
    }
    Ok(Moments { t: grid.t_end(), mean, second_moment: mean * mean + drift_var + noise })
}

/// Error of starting the integrals at `r` instead of `-∞`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncationError {
    /// `‖p 1_{[t-r,∞)}‖₁² + ‖g 1_{[t-r,∞)}‖₂²`
    pub kernel_norm: f64,
    /// `max(E[a²], E[L(1)²] sup E[σ²])`; the L²(P) error is at most
    /// `constant · kernel_norm`.
    pub constant: f64,
    pub tails: TailNorms,
}

pub fn truncation_error(model: &Model, t: f64, r: f64) -> Result<TruncationError> {
    model.validate()?;
    let horizon = t - r;
    if !(horizon >= 0.0) {
        return Err(Error::arg(format!("truncation point {r} lies after t = {t}")));
    }
    let tails = tail_norms(&model.drift_kernel, &model.vol_kernel, horizon)?;
    let (_, a2) = model.drift.moment_bounds(Role::Drift)?;
    let (_, s2) = model.sigma.moment_bounds(Role::Volatility)?;
    let l2 = model.driver.moments().second_moment();
    Ok(TruncationError { kernel_norm: tails.combined(), constant: a2.max(l2 * s2), tails })
}

/// Terms of the a-priori bound
/// `E|y_j^n - Y(t_n)(x_j)|² ≤ C₁(Δx - Δt) + C₂Δt² + C₃M_a + C₄M_σ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorBudget {
    pub n: usize,
    pub elapsed: f64,
    pub dt: f64,
    pub dx: f64,
    /// Squared L²(P) Lipschitz constant of the coefficients.
    pub lipschitz: f64,
    /// `max(1, sup g², sup p²)`
    pub k: f64,
    /// `E⟨M⟩(t_n)`
    pub bracket: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub m_a: f64,
    pub m_sigma: f64,
    pub total: f64,
}

const BUDGET_KEYS: [&str; 15] = [
    "n", "elapsed", "dt", "dx", "lipschitz", "k", "bracket", "c1", "c2", "c3", "c4", "m_a", "m_sigma", "total",
    "dx_minus_dt",
];

impl ErrorBudget {
    fn values(&self) -> [f64; 15] {
        [
            self.n as f64,
            self.elapsed,
            self.dt,
            self.dx,
            self.lipschitz,
            self.k,
            self.bracket,
            self.c1,
            self.c2,
            self.c3,
            self.c4,
            self.m_a,
            self.m_sigma,
            self.total,
            self.dx - self.dt,
        ]
    }

    pub fn to_text(&self) -> String {
        BUDGET_KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| if *k == "n" { format!("{k}: {}\n", self.n) } else { format!("{k}: {v:.16e}\n") })
            .collect()
    }

    pub fn csv_header() -> String {
        BUDGET_KEYS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cells = vec![self.n.to_string()];
        cells.extend(self.values()[1..].iter().map(|v| format!("{v:.16e}")));
        cells.join(",")
    }
}

/// Assembles the budget at time index `n` for the separated coefficients
/// `α = p a + m g σ`, `β = g σ`.
pub fn error_budget(model: &Model, grid: &GridSpec, n: usize) -> Result<ErrorBudget> {
    model.validate()?;
    let grid = grid.validate()?;
    if n > grid.steps {
        return Err(Error::arg(format!("time index {n} beyond N = {}", grid.steps)));
    }
    let domain = match model.boundary {
        BoundaryMode::ExtendedTriangle => grid.x(grid.nodes + grid.steps),
        BoundaryMode::ZeroAtXj => grid.x(grid.nodes),
    };
    let lip_g = model.vol_kernel.lipschitz_constant(domain)?;
    let lip_p = model.drift_kernel.lipschitz_constant(domain)?;
    let sup_g = model.vol_kernel.sup_abs(domain)?;
    let sup_p = model.drift_kernel.sup_abs(domain)?;
    let (_, a2) = model.drift.moment_bounds(Role::Drift)?;
    let (_, s2) = model.sigma.moment_bounds(Role::Volatility)?;
    let driver = model.driver.moments();
    let m = driver.mean;

    let lip_beta = lip_g * lip_g * s2;
    let lip_alpha = if m == 0.0 {
        lip_p * lip_p * a2
    } else {
        2.0 * (lip_p * lip_p * a2 + m * m * lip_g * lip_g * s2)
    };
    let lipschitz = lip_alpha.max(lip_beta);
    let k = 1f64.max(sup_g * sup_g).max(sup_p * sup_p);

    let elapsed = n as f64 * grid.dt;
    let bracket = driver.variance * elapsed;
    let c1 = 3.0 * lipschitz * elapsed * (1.0 + 4.0 * elapsed * elapsed + 4.0 * bracket);
    let c2 = 12.0 * lipschitz * (elapsed * elapsed + bracket);
    let c3 = 12.0 * k * lipschitz * elapsed * elapsed;
    let c4 = 12.0 * k * bracket;

    let m_sigma = model.sigma.modulus(Role::Volatility, grid.dt)?;
    let mut m_a = model.drift.modulus(Role::Drift, grid.dt)?;
    if m != 0.0 {
        // α(r) - α(s) = p (a(r) - a(s)) + m g (σ(r) - σ(s))
        m_a = 2.0 * (m_a + m * m * m_sigma);
    }
    let total = c1 * (grid.dx - grid.dt) + c2 * grid.dt * grid.dt + c3 * m_a + c4 * m_sigma;
    Ok(ErrorBudget {
        n,
        elapsed,
        dt: grid.dt,
        dx: grid.dx,
        lipschitz,
        k,
        bracket,
        c1,
        c2,
        c3,
        c4,
        m_a,
        m_sigma,
        total,
    })
}

/// Mean and variance of the lattice variable `ΔxZ`, `Z ~ Bin(m, λ)`, by
/// summation over the binomial weights, next to the exact `t` and `t(Δx - Δt)`
/// with `t = mΔt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeMoments {
    pub mean: f64,
    pub variance: f64,
    pub exact_mean: f64,
    pub exact_variance: f64,
}

pub fn lattice_moments(m: usize, dx: f64, dt: f64) -> Result<LatticeMoments> {
    let lam = dt / dx;
    if !(lam > 0.0 && lam <= 1.0) {
        return Err(Error::Cfl { dt, dx, lambda: lam });
    }
    let w = binomial_weights(m, lam);
    let mean: f64 = w.iter().enumerate().map(|(k, w)| w * k as f64 * dx).sum();
    let variance: f64 = w.iter().enumerate().map(|(k, w)| w * (k as f64 * dx - mean).powi(2)).sum();
    let t = m as f64 * dt;
    Ok(LatticeMoments { mean, variance, exact_mean: t, exact_variance: t * (dx - dt) })
}

/// Monte Carlo mean and second moment of the boundary `y_0^N`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McMoments {
    pub paths: usize,
    pub mean: f64,
    pub mean_se: f64,
    pub second_moment: f64,
    pub second_moment_se: f64,
}

pub fn boundary_moments_mc(model: &Model, grid: &GridSpec, seed: u64, paths: usize) -> Result<McMoments> {
    if paths < 2 {
        return Err(Error::arg("Monte Carlo moments need at least two paths"));
    }
    let options = SolveOptions { retention: Retention::Boundary, ..Default::default() };
    let finals: Vec<f64> = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let r = Realization::sample(model, grid, seed, i)?;
            Ok(*solve_with(model, grid, &r, options)?.boundary().last().unwrap())
        })
        .collect::<Result<_>>()?;
    let squares: Vec<f64> = finals.iter().map(|x| x * x).collect();
    let (mean, mean_se) = mean_and_stderr(&finals);
    let (second_moment, second_moment_se) = mean_and_stderr(&squares);
    Ok(McMoments { paths, mean, mean_se, second_moment, second_moment_se })
}

/// One grid level of the scheme-versus-exact-OU comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuStudyRow {
    pub dt: f64,
    pub dx: f64,
    pub paths: usize,
    /// Root mean square error pooled over all paths and times `t_1 … t_N`.
    pub rmse: f64,
    pub terminal_rmse: f64,
    /// `max_n MSE(t_n) / B(n)`; at most 1 when the budget dominates.
    pub worst_budget_ratio: f64,
    pub terminal_budget: f64,
}

/// Solves `Exponential(α)`, constant `σ`, Brownian(1) at CFL ratio `lam` and
/// compares the boundary with the exact OU recursion on the same Gaussians.
pub fn exact_ou_study(alpha: f64, sigma: f64, lam: f64, dt: f64, t_end: f64, paths: usize, seed: u64) -> Result<OuStudyRow> {
    if paths == 0 {
        return Err(Error::arg("need at least one path"));
    }
    let steps = (t_end / dt).round() as usize;
    let grid = GridSpec::new(0.0, dt, steps, dt / lam, 0)?;
    let driver = Driver::brownian(1.0)?;
    let model = Model::new(Kernel::exponential(alpha)?, VolatilityModel::Constant(sigma), driver.clone());
    let options = SolveOptions { retention: Retention::Boundary, ..Default::default() };
    let errors: Vec<Vec<f64>> = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let r = Realization::sample(&model, &grid, seed, i)?;
            let y = solve_with(&model, &grid, &r, options)?.boundary();
            let x = exact_ou_path(alpha, sigma, &driver, &r.increments)?;
            Ok(y.iter().zip(&x).map(|(y, x)| (y - x) * (y - x)).collect())
        })
        .collect::<Result<_>>()?;
    let mut mse = vec![0.0; steps + 1];
    for e in &errors {
        for (acc, v) in mse.iter_mut().zip(e) {
            *acc += v;
        }
    }
    mse.iter_mut().for_each(|v| *v /= paths as f64);
    let mut worst = 0.0f64;
    let mut terminal_budget = 0.0;
    for (n, m) in mse.iter().enumerate().skip(1) {
        let b = error_budget(&model, &grid, n)?.total;
        worst = worst.max(m / b);
        terminal_budget = b;
    }
    let pooled = mse[1..].iter().sum::<f64>() / steps as f64;
    Ok(OuStudyRow {
        dt,
        dx: grid.dx,
        paths,
        rmse: pooled.sqrt(),
        terminal_rmse: mse[steps].sqrt(),
        worst_budget_ratio: worst,
        terminal_budget,
    })
}

/// Empirical `sup_{0 < lag < Δt} E|σ(s + lag) - σ(s)|²` over a sub-lattice of
/// spacing `Δt / sub`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModulusEstimate {
    pub dt: f64,
    pub value: f64,
    pub std_error: f64,
    /// Lag (in sub-lattice steps) attaining the supremum.
    pub lag: usize,
}

pub fn sigma_modulus_empirical(sigma: &VolatilityModel, dt: f64, sub: usize, paths: usize, seed: u64) -> Result<ModulusEstimate> {
    if sub < 2 || paths < 2 {
        return Err(Error::arg("need a sub-lattice of at least 2 steps and at least two paths"));
    }
    let h = dt / sub as f64;
    let window = 4 * sub;
    let grid = GridSpec::new(0.0, h, window, h, 0)?;
    let per_path: Vec<Vec<f64>> = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let z = sigma.sample_values(&grid, seed, StreamKey::new(SUBORDINATOR, i))?;
            let s: Vec<f64> = match sigma {
                VolatilityModel::OuSubordinator { .. } => z.iter().map(|z| z.max(0.0).sqrt()).collect(),
                _ => z,
            };
            Ok((1..sub)
                .map(|lag| {
                    let d: Vec<f64> = s.windows(lag + 1).map(|w| (w[lag] - w[0]).powi(2)).collect();
                    d.iter().sum::<f64>() / d.len() as f64
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut best = ModulusEstimate { dt, value: 0.0, std_error: 0.0, lag: 1 };
    for lag in 1..sub {
        let xs: Vec<f64> = per_path.iter().map(|p| p[lag - 1]).collect();
        let (m, se) = mean_and_stderr(&xs);
        if m >= best.value {
            best = ModulusEstimate { dt, value: m, std_error: se, lag };
        }
    }
    Ok(best)
}
