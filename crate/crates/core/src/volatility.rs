//! Volatility `σ` and drift `a` processes sampled on the time grid.
//!
//! The stochastic variant is the subordinator-driven OU process
//! `Z(t) = ∫_{-∞}^t e^{-λ(t-s)} dU(s)` with `σ² = Z`.

use std::io::Write;

use crate::drivers::Driver;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamKey, DRIFT, SUBORDINATOR};
use crate::scheme::GridSpec;

/// Largest `λ h` used while burning in the OU state. The left-point
/// recursion has a relative mean bias of about `λ h / 2`.
const BURN_IN_MAX_DECAY: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub enum VolatilityModel {
    Constant(f64),
    /// Piecewise linear through `(times[i], values[i])`, flat outside.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
    OuSubordinator { rate: f64, subordinator: Driver, burn_in_tol: f64 },
}

/// Which role a model plays: `σ = √Z` for volatility, `a = Z` for drift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Volatility,
    Drift,
}

/// Left limits `a(t_n-)`, `σ(t_n-)` on the grid times `t_0 … t_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathPair {
    pub times: Vec<f64>,
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
    pub seed: u64,
    pub index: u64,
}

impl PathPair {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,a,sigma")?;
        for ((t, a), s) in self.times.iter().zip(&self.drift).zip(&self.sigma) {
            writeln!(w, "{t:.16e},{a:.16e},{s:.16e}")?;
        }
        Ok(())
    }
}

impl VolatilityModel {
    pub fn ou_subordinator(rate: f64, subordinator: Driver, burn_in_tol: f64) -> Result<Self> {
        let m = VolatilityModel::OuSubordinator { rate, subordinator, burn_in_tol };
        m.validate()?;
        Ok(m)
    }

    pub fn tabulated(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let m = VolatilityModel::Tabulated { times, values };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            VolatilityModel::Constant(v) if v.is_finite() => Ok(()),
            VolatilityModel::Constant(v) => Err(Error::arg(format!("constant level must be finite, got {v}"))),
            VolatilityModel::Tabulated { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::Misaligned(format!(
                        "tabulated path needs matching non-empty times/values, got {} and {}",
                        times.len(),
                        values.len()
                    )));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::arg("tabulated times must be strictly increasing"));
                }
                if times.iter().chain(values).any(|v| !v.is_finite()) {
                    return Err(Error::arg("tabulated path contains non-finite entries"));
                }
                Ok(())
            }
            VolatilityModel::OuSubordinator { rate, subordinator, burn_in_tol } => {
                if !(*rate > 0.0 && rate.is_finite()) {
                    return Err(Error::arg(format!("mean reversion rate must be > 0, got {rate}")));
                }
                if !(*burn_in_tol > 0.0 && *burn_in_tol < 1.0) {
                    return Err(Error::arg(format!("burn-in tolerance must lie in (0, 1), got {burn_in_tol}")));
                }
                subordinator.validate()?;
                if !subordinator.is_subordinator() {
                    return Err(Error::arg("OU volatility needs an uncompensated subordinator with nonnegative jumps"));
                }
                Ok(())
            }
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, VolatilityModel::OuSubordinator { .. })
    }

    fn deterministic_at(&self, t: f64) -> f64 {
        match self {
            VolatilityModel::Constant(v) => *v,
            VolatilityModel::Tabulated { times, values } => {
                let last = times.len() - 1;
                if t <= times[0] {
                    return values[0];
                }
                if t >= times[last] {
                    return values[last];
                }
                let k = times.partition_point(|x| *x <= t);
                let (t0, t1) = (times[k - 1], times[k]);
                let w = (t - t0) / (t1 - t0);
                values[k - 1] + w * (values[k] - values[k - 1])
            }
            VolatilityModel::OuSubordinator { .. } => unreachable!("stochastic model"),
        }
    }

    /// Samples the model on the grid times, returning the raw process values
    /// (`Z` for the OU variant).
    pub fn sample_values(&self, grid: &GridSpec, seed: u64, key: StreamKey) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            VolatilityModel::OuSubordinator { rate, subordinator, burn_in_tol } => {
                let mut rng = stream_rng(seed, key);
                let mean = subordinator.moments().mean / rate;
                let horizon = (1.0 / burn_in_tol).ln() / rate;
                let h = grid.dt.max(BURN_IN_MAX_DECAY / rate).min(horizon);
                let steps = (horizon / h).ceil() as usize;
                let h = horizon / steps as f64;
                let decay = (-rate * h).exp();
                let mut z = mean;
                for _ in 0..steps {
                    let du = subordinator.sample_one(h, &mut rng);
                    z = decay * z + decay * du;
                }
                let mut increments = vec![0.0; grid.steps];
                subordinator.fill(grid.dt, &mut rng, &mut increments);
                Ok(ou_path_from_increments(*rate, z, &increments, grid.dt))
            }
            _ => Ok((0..=grid.steps).map(|n| self.deterministic_at(grid.time(n))).collect()),
        }
    }

    /// Mean and variance of the stationary OU state `Z`.
    pub fn stationary_moments(&self) -> Result<(f64, f64)> {
        match self {
            VolatilityModel::OuSubordinator { rate, subordinator, .. } => {
                let m = subordinator.moments();
                Ok((m.mean / rate, m.variance / (2.0 * rate)))
            }
            _ => Err(Error::Unsupported("stationary moments exist for the OU subordinator model only".into())),
        }
    }

    /// `(2C/λ)(1 - e^{-λ dt / 2})` with `C = E[U(1)²]`, a bound on
    /// `sup_{|s-r| < dt} E|σ(s) - σ(r)|²` in the stationary regime.
    pub fn sigma_modulus_bound(&self, dt: f64) -> Result<f64> {
        match self {
            VolatilityModel::OuSubordinator { rate, subordinator, .. } => {
                let c = subordinator.moments().second_moment();
                Ok(2.0 * c / rate * -(-rate * dt / 2.0).exp_m1())
            }
            _ => Err(Error::Unsupported("modulus bound exists for the OU subordinator model only".into())),
        }
    }

    /// Bound on `sup_{|s-r| < dt} E|v(s) - v(r)|²` for the process as used in `role`.
    pub fn modulus(&self, role: Role, dt: f64) -> Result<f64> {
        match self {
            VolatilityModel::Constant(_) => Ok(0.0),
            VolatilityModel::Tabulated { times, values } => {
                let slope = times
                    .windows(2)
                    .zip(values.windows(2))
                    .map(|(t, v)| ((v[1] - v[0]) / (t[1] - t[0])).abs())
                    .fold(0.0, f64::max);
                Ok((slope * dt).powi(2))
            }
            VolatilityModel::OuSubordinator { rate, .. } => match role {
                Role::Volatility => self.sigma_modulus_bound(dt),
                Role::Drift => {
                    // stationary OU autocovariance Var·e^{-λh}
                    let (_, var) = self.stationary_moments()?;
                    Ok(2.0 * var * -(-rate * dt).exp_m1())
                }
            },
        }
    }

    /// `E[v(t)²]` for the process as used in `role`; stationary for the OU variant.
    pub fn second_moment_at(&self, role: Role, t: f64) -> Result<f64> {
        match self {
            VolatilityModel::OuSubordinator { .. } => {
                let (mean, var) = self.stationary_moments()?;
                Ok(match role {
                    Role::Volatility => mean,
                    Role::Drift => var + mean * mean,
                })
            }
            _ => Ok(self.deterministic_at(t).powi(2)),
        }
    }

    /// `E[v(t)]`. Not available for `σ = √Z`, whose mean has no closed form.
    pub fn mean_at(&self, role: Role, t: f64) -> Result<f64> {
        match (self, role) {
            (VolatilityModel::OuSubordinator { .. }, Role::Drift) => Ok(self.stationary_moments()?.0),
            (VolatilityModel::OuSubordinator { .. }, Role::Volatility) => {
                Err(Error::Unsupported("E[sqrt(Z)] has no closed form".into()))
            }
            _ => Ok(self.deterministic_at(t)),
        }
    }

    /// `sup_t E[v(t)]` and `sup_t E[v(t)²]` for the process as used in `role`.
    pub fn moment_bounds(&self, role: Role) -> Result<(f64, f64)> {
        match self {
            VolatilityModel::Constant(v) => Ok((v.abs(), v * v)),
            VolatilityModel::Tabulated { values, .. } => {
                let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                Ok((m, m * m))
            }
            VolatilityModel::OuSubordinator { .. } => {
                let (mean, var) = self.stationary_moments()?;
                match role {
                    // E[σ] ≤ sqrt(E[Z]) by Jensen
                    Role::Volatility => Ok((mean.sqrt(), mean)),
                    Role::Drift => Ok((mean, var + mean * mean)),
                }
            }
        }
    }
}

/// `Z_{n+1} = e^{-λΔt} Z_n + e^{-λΔt} ΔU_n`, left-point weighting so that
/// `Z_n` only sees increments before `t_n`.
pub fn ou_path_from_increments(rate: f64, z0: f64, increments: &[f64], dt: f64) -> Vec<f64> {
    let decay = (-rate * dt).exp();
    let mut out = Vec::with_capacity(increments.len() + 1);
    let mut z = z0;
    out.push(z);
    for du in increments {
        z = decay * z + decay * du;
        out.push(z);
    }
    out
}

/// Samples `a` and `σ` on the grid for Monte Carlo path `index`.
pub fn simulate_paths(
    sigma: &VolatilityModel,
    drift: &VolatilityModel,
    grid: &GridSpec,
    seed: u64,
    index: u64,
) -> Result<PathPair> {
    let grid = grid.validate()?;
    let mut sig = sigma.sample_values(&grid, seed, StreamKey::new(SUBORDINATOR, index))?;
    match sigma {
        VolatilityModel::OuSubordinator { .. } => sig.iter_mut().for_each(|z| *z = z.max(0.0).sqrt()),
        _ => {
            if let Some(bad) = sig.iter().find(|s| **s < 0.0) {
                return Err(Error::arg(format!("volatility must be >= 0, got {bad}")));
            }
        }
    }
    let drift_values = drift.sample_values(&grid, seed, StreamKey::new(DRIFT, index))?;
    Ok(PathPair {
        times: (0..=grid.steps).map(|n| grid.time(n)).collect(),
        drift: drift_values,
        sigma: sig,
        seed,
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::JumpLaw;

    fn ig_ou(rate: f64) -> VolatilityModel {
        VolatilityModel::ou_subordinator(rate, Driver::inverse_gaussian(15.0, 1.0, false).unwrap(), 1e-3).unwrap()
    }

    fn grid(steps: usize, dt: f64) -> GridSpec {
        GridSpec::new(0.0, dt, steps, dt, 0).unwrap()
    }

    #[test]
    fn constant_paths() {
        let g = grid(10, 0.1);
        let p = simulate_paths(&VolatilityModel::Constant(1.0), &VolatilityModel::Constant(0.0), &g, 1, 0).unwrap();
        assert_eq!(p.len(), 11);
        assert!(p.sigma.iter().all(|s| *s == 1.0));
        assert!(p.drift.iter().all(|a| *a == 0.0));
        assert!((p.times[10] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tabulated_interpolates() {
        let m = VolatilityModel::tabulated(vec![0.0, 1.0], vec![1.0, 3.0]).unwrap();
        let g = grid(4, 0.25);
        let v = m.sample_values(&g, 0, StreamKey::new(DRIFT, 0)).unwrap();
        assert_eq!(v, vec![1.0, 1.5, 2.0, 2.5, 3.0]);
        assert_eq!(m.modulus(Role::Drift, 0.1).unwrap(), (2.0f64 * 0.1).powi(2));
        assert!(VolatilityModel::tabulated(vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(VolatilityModel::tabulated(vec![0.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn negative_volatility_rejected() {
        let g = grid(2, 0.1);
        assert!(simulate_paths(&VolatilityModel::Constant(-1.0), &VolatilityModel::Constant(0.0), &g, 1, 0).is_err());
    }

    #[test]
    fn null_subordinator_decays() {
        let sub = Driver::compound_poisson(0.0, JumpLaw::Exponential { mean: 1.0 }, false).unwrap();
        let z = ou_path_from_increments(0.5, 2.0, &[0.0; 20], 0.1);
        for (n, v) in z.iter().enumerate() {
            let exact = 2.0 * (-0.5 * 0.1 * n as f64).exp();
            assert!((v - exact).abs() < 1e-14 * exact);
        }
        // with a null subordinator the burn-in drives the stationary mean 0 to 0
        let m = VolatilityModel::ou_subordinator(0.5, sub, 1e-3).unwrap();
        let v = m.sample_values(&grid(5, 0.1), 1, StreamKey::new(SUBORDINATOR, 0)).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn stationary_moment_formulas() {
        let (m, v) = ig_ou(0.01).stationary_moments().unwrap();
        assert!((m - 1500.0).abs() < 1e-9);
        assert!((v - 750.0).abs() < 1e-9);
        let (m_fast, _) = ig_ou(1e12).stationary_moments().unwrap();
        assert!(m_fast < 1e-10);
        assert!(VolatilityModel::Constant(1.0).stationary_moments().is_err());
    }

    #[test]
    fn modulus_bound_values() {
        let m = ig_ou(0.01);
        assert_eq!(m.sigma_modulus_bound(0.0).unwrap(), 0.0);
        let b = m.sigma_modulus_bound(0.01).unwrap();
        let direct = 48000.0 * (1.0 - (-0.00005f64).exp());
        assert!((b - direct).abs() < 1e-9 * direct);
        assert!((b - 2.3999400).abs() < 1e-6, "{b}");
        let mut prev = 0.0;
        for dt in [1e-3, 1e-2, 0.1, 1.0, 10.0] {
            let v = m.sigma_modulus_bound(dt).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn ou_paths_are_nonnegative_and_predictable() {
        let m = ig_ou(0.5);
        let g = grid(200, 0.01);
        let z = m.sample_values(&g, 4, StreamKey::new(SUBORDINATOR, 0)).unwrap();
        assert!(z.iter().all(|v| *v >= 0.0));

        let sub = Driver::inverse_gaussian(15.0, 1.0, false).unwrap();
        let mut inc = sub.sample_increments(0.01, 100, 9, StreamKey::new(SUBORDINATOR, 0)).unwrap().values;
        let base = ou_path_from_increments(0.5, 30.0, &inc, 0.01);
        for cut in [0usize, 10, 50, 99] {
            inc[cut..].reverse();
            let permuted = ou_path_from_increments(0.5, 30.0, &inc, 0.01);
            // Z_n uses ΔU_0 … ΔU_{n-1} only
            assert_eq!(&permuted[..=cut], &base[..=cut]);
            inc[cut..].reverse();
        }
    }

    #[test]
    fn ou_long_run_mean() {
        // Z_N after burn-in across independent paths: stationary mean δ/(γλ)
        let m = ig_ou(0.01);
        let g = grid(10, 0.01);
        let zs: Vec<f64> = (0..1000)
            .map(|i| *m.sample_values(&g, 77, StreamKey::new(SUBORDINATOR, i)).unwrap().last().unwrap())
            .collect();
        let (mean, se) = crate::drivers::mean_and_stderr(&zs);
        assert!((mean - 1500.0).abs() < 4.0 * se + 1.5, "mean {mean} se {se}");
    }

    #[test]
    fn path_csv_layout() {
        let g = grid(2, 0.5);
        let p = simulate_paths(&VolatilityModel::Constant(2.0), &VolatilityModel::Constant(0.5), &g, 1, 0).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,a,sigma");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("1.0000000000000000e0,5.0000000000000000e-1,2"));
    }
}
