//! Deterministic stationary kernels `g(u)`, `p(u)` with `u = t - s + x >= 0`.
//!
//! Besides evaluation the kernels know their Lipschitz constants, sup bounds
//! and tail norms, which feed the truncation and convergence error budgets.

use std::fmt;

use crate::error::{Error, Result};
use crate::quad::{self, DEFAULT_REL_TOL};

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    Zero,
    Constant { level: f64 },
    /// `e^{-alpha u}`
    Exponential { alpha: f64 },
    /// `a e^{-alpha u} / (u + b)`
    Bjerksund { a: f64, b: f64, alpha: f64 },
    /// `u^{H - 1/2}`
    PowerFbm { hurst: f64 },
    /// `u^{H - 1/2}` for `u > epsilon`, frozen at `epsilon^{H - 1/2}` below.
    RegularizedFbm { hurst: f64, epsilon: f64 },
    /// `base(u + offset)`
    Shifted { base: Box<Kernel>, offset: f64 },
    /// `base(u)` on `[0, support]`, zero beyond.
    Truncated { base: Box<Kernel>, support: f64 },
}

/// Tail integrals of a drift/volatility kernel pair from a horizon `r` on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailNorms {
    /// `∫_r^∞ |p(u)| du`
    pub l1_tail: f64,
    /// `∫_r^∞ g(u)² du`
    pub l2_tail_sq: f64,
    pub horizon: f64,
}

impl TailNorms {
    /// `l1_tail² + l2_tail_sq`, the kernel part of the truncation error.
    pub fn combined(&self) -> f64 {
        self.l1_tail * self.l1_tail + self.l2_tail_sq
    }
}

/// Regularization error of the fBm kernel near the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FbmRegularization {
    /// `(2 + 1/H) ε^{2H}`
    pub bound: f64,
    /// `∫₀^ε (u^{H-1/2} - ε^{H-1/2})² du` by quadrature.
    pub exact: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Norm {
    L1,
    L2Squared,
}

fn check_hurst(hurst: f64) -> Result<()> {
    if hurst > 0.0 && hurst < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("Hurst parameter must lie in (0, 1), got {hurst}")))
    }
}

impl Kernel {
    pub fn constant(level: f64) -> Result<Self> {
        let k = Kernel::Constant { level };
        k.validate()?;
        Ok(k)
    }

    pub fn exponential(alpha: f64) -> Result<Self> {
        let k = Kernel::Exponential { alpha };
        k.validate()?;
        Ok(k)
    }

    pub fn bjerksund(a: f64, b: f64, alpha: f64) -> Result<Self> {
        let k = Kernel::Bjerksund { a, b, alpha };
        k.validate()?;
        Ok(k)
    }

    pub fn power_fbm(hurst: f64) -> Result<Self> {
        let k = Kernel::PowerFbm { hurst };
        k.validate()?;
        Ok(k)
    }

    pub fn regularized_fbm(hurst: f64, epsilon: f64) -> Result<Self> {
        let k = Kernel::RegularizedFbm { hurst, epsilon };
        k.validate()?;
        Ok(k)
    }

    pub fn shifted(self, offset: f64) -> Result<Self> {
        let k = Kernel::Shifted { base: Box::new(self), offset };
        k.validate()?;
        Ok(k)
    }

    pub fn truncated(self, support: f64) -> Result<Self> {
        let k = Kernel::Truncated { base: Box::new(self), support };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::Zero => Ok(()),
            Kernel::Constant { level } if level.is_finite() => Ok(()),
            Kernel::Constant { level } => Err(Error::arg(format!("constant level must be finite, got {level}"))),
            Kernel::Exponential { alpha } if *alpha >= 0.0 && alpha.is_finite() => Ok(()),
            Kernel::Exponential { alpha } => Err(Error::arg(format!("decay rate must be >= 0, got {alpha}"))),
            Kernel::Bjerksund { a, b, alpha } => {
                if !(*a > 0.0 && a.is_finite()) {
                    return Err(Error::arg(format!("Bjerksund level a must be > 0, got {a}")));
                }
                if !(*b > 0.0 && b.is_finite()) {
                    return Err(Error::arg(format!("Bjerksund shift b must be > 0, got {b}")));
                }
                if !(*alpha >= 0.0 && alpha.is_finite()) {
                    return Err(Error::arg(format!("Bjerksund decay must be >= 0, got {alpha}")));
                }
                Ok(())
            }
            Kernel::PowerFbm { hurst } => check_hurst(*hurst),
            Kernel::RegularizedFbm { hurst, epsilon } => {
                check_hurst(*hurst)?;
                if *epsilon > 0.0 && epsilon.is_finite() {
                    Ok(())
                } else {
                    Err(Error::arg(format!("regularization length must be > 0, got {epsilon}")))
                }
            }
            Kernel::Shifted { base, offset } => {
                if !(*offset >= 0.0 && offset.is_finite()) {
                    return Err(Error::arg(format!("shift must be >= 0, got {offset}")));
                }
                base.validate()
            }
            Kernel::Truncated { base, support } => {
                if !(*support >= 0.0 && support.is_finite()) {
                    return Err(Error::arg(format!("support must be >= 0, got {support}")));
                }
                base.validate()
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Kernel::Zero => true,
            Kernel::Constant { level } => *level == 0.0,
            Kernel::Shifted { base, .. } => base.is_zero(),
            Kernel::Truncated { base, .. } => base.is_zero(),
            _ => false,
        }
    }

    /// Evaluates the kernel at `u >= 0`.
    pub fn eval(&self, u: f64) -> Result<f64> {
        if !(u >= 0.0) {
            return Err(Error::arg(format!("kernel argument must be >= 0, got {u}")));
        }
        Ok(match self {
            Kernel::Zero => 0.0,
            Kernel::Constant { level } => *level,
            Kernel::Exponential { alpha } => (-alpha * u).exp(),
            Kernel::Bjerksund { a, b, alpha } => a * (-alpha * u).exp() / (u + b),
            Kernel::PowerFbm { hurst } => {
                if u == 0.0 && *hurst < 0.5 {
                    return Err(Error::Singularity {
                        at: 0.0,
                        hint: format!("u^(H-1/2) with H = {hurst} diverges at the origin; use the regularized fBm kernel"),
                    });
                }
                u.powf(hurst - 0.5)
            }
            Kernel::RegularizedFbm { hurst, epsilon } => u.max(*epsilon).powf(hurst - 0.5),
            Kernel::Shifted { base, offset } => return base.eval(u + offset),
            Kernel::Truncated { base, support } => {
                if u <= *support {
                    return base.eval(u);
                }
                0.0
            }
        })
    }

    /// Upper bound on `sup |g'|` over `[0, domain_max]`.
    pub fn lipschitz_constant(&self, domain_max: f64) -> Result<f64> {
        if !(domain_max >= 0.0) {
            return Err(Error::arg(format!("domain bound must be >= 0, got {domain_max}")));
        }
        self.lipschitz_on(0.0, domain_max)
    }

    fn lipschitz_on(&self, lo: f64, hi: f64) -> Result<f64> {
        Ok(match self {
            Kernel::Zero | Kernel::Constant { .. } => 0.0,
            Kernel::Exponential { alpha } => alpha * (-alpha * lo).exp(),
            // |g'(u)| = a e^{-αu} (1/(u+b)² + α/(u+b)) is decreasing, so the sup sits at lo
            Kernel::Bjerksund { a, b, alpha } => {
                let w = lo + b;
                a * (-alpha * lo).exp() * (1.0 / (w * w) + alpha / w)
            }
            Kernel::PowerFbm { hurst } => {
                if *hurst == 0.5 {
                    0.0
                } else if lo > 0.0 {
                    (hurst - 0.5).abs() * lo.powf(hurst - 1.5)
                } else {
                    return Err(Error::NotLipschitz(format!(
                        "derivative of u^(H-1/2), H = {hurst}, is unbounded at the origin; use the regularized fBm kernel"
                    )));
                }
            }
            Kernel::RegularizedFbm { hurst, epsilon } => {
                if hi <= *epsilon {
                    0.0
                } else {
                    (hurst - 0.5).abs() * lo.max(*epsilon).powf(hurst - 1.5)
                }
            }
            Kernel::Shifted { base, offset } => base.lipschitz_on(lo + offset, hi + offset)?,
            Kernel::Truncated { base, support } => {
                if lo > *support {
                    0.0
                } else if hi < *support || base.eval(*support)? == 0.0 {
                    base.lipschitz_on(lo, hi.min(*support))?
                } else {
                    return Err(Error::NotLipschitz(format!("kernel jumps to zero at u = {support}")));
                }
            }
        })
    }

    /// Upper bound on `sup |g|` over `[0, domain_max]`.
    pub fn sup_abs(&self, domain_max: f64) -> Result<f64> {
        self.sup_abs_on(0.0, domain_max)
    }

    fn sup_abs_on(&self, lo: f64, hi: f64) -> Result<f64> {
        Ok(match self {
            Kernel::Zero => 0.0,
            Kernel::Constant { level } => level.abs(),
            Kernel::Exponential { alpha } => (-alpha * lo).exp(),
            Kernel::Bjerksund { a, b, alpha } => a * (-alpha * lo).exp() / (lo + b),
            Kernel::PowerFbm { hurst } => {
                if *hurst < 0.5 {
                    if lo == 0.0 {
                        return Err(Error::Singularity {
                            at: 0.0,
                            hint: "fBm kernel is unbounded at the origin".into(),
                        });
                    }
                    lo.powf(hurst - 0.5)
                } else {
                    hi.powf(hurst - 0.5)
                }
            }
            Kernel::RegularizedFbm { hurst, epsilon } => {
                let at = if *hurst < 0.5 { lo } else { hi };
                at.max(*epsilon).powf(hurst - 0.5)
            }
            Kernel::Shifted { base, offset } => base.sup_abs_on(lo + offset, hi + offset)?,
            Kernel::Truncated { base, support } => {
                if lo > *support {
                    0.0
                } else {
                    base.sup_abs_on(lo, hi.min(*support))?
                }
            }
        })
    }

    /// Points where the kernel is not smooth; quadrature splits there.
    pub(crate) fn breakpoints(&self) -> Vec<f64> {
        match self {
            Kernel::RegularizedFbm { epsilon, .. } => vec![*epsilon],
            Kernel::Shifted { base, offset } => base
                .breakpoints()
                .into_iter()
                .map(|b| b - offset)
                .filter(|b| *b > 0.0)
                .collect(),
            Kernel::Truncated { base, support } => {
                let mut v: Vec<f64> = base.breakpoints().into_iter().filter(|b| b < support).collect();
                v.push(*support);
                v
            }
            _ => Vec::new(),
        }
    }

    /// End of the support, if finite.
    fn support_end(&self) -> Option<f64> {
        match self {
            k if k.is_zero() => Some(0.0),
            Kernel::Shifted { base, offset } => base.support_end().map(|e| (e - offset).max(0.0)),
            Kernel::Truncated { base, support } => {
                Some(base.support_end().map_or(*support, |e| e.min(*support)))
            }
            _ => None,
        }
    }

    fn tail_converges(&self, norm: Norm) -> bool {
        if self.support_end().is_some() {
            return true;
        }
        match self {
            Kernel::Exponential { alpha } => *alpha > 0.0,
            Kernel::Bjerksund { alpha, .. } => norm == Norm::L2Squared || *alpha > 0.0,
            Kernel::Shifted { base, .. } => base.tail_converges(norm),
            // u^{H-1/2} is neither in L¹ nor L² at infinity for H in (0, 1)
            _ => false,
        }
    }

    fn tail_integral(&self, r: f64, norm: Norm) -> Result<f64> {
        if !r.is_finite() {
            return Err(Error::arg(format!("tail horizon must be finite, got {r}")));
        }
        if !self.tail_converges(norm) {
            let what = match norm {
                Norm::L1 => "L1",
                Norm::L2Squared => "L2",
            };
            return Err(Error::Divergent(format!("{what} tail of {self} is infinite")));
        }
        let r = r.max(0.0);
        let integrand = |u: f64| {
            let v = self.eval(u).unwrap_or(0.0);
            match norm {
                Norm::L1 => v.abs(),
                Norm::L2Squared => v * v,
            }
        };
        let end = self.support_end();
        if let Some(e) = end {
            if r >= e {
                return Ok(0.0);
            }
        }
        let mut cuts: Vec<f64> = self.breakpoints().into_iter().filter(|b| *b > r).collect();
        if let Some(e) = end {
            cuts.retain(|b| *b < e);
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();

        let mut total = 0.0;
        let mut lo = r;
        for c in cuts {
            total += quad::integrate(integrand, lo, c, DEFAULT_REL_TOL)?.value;
            lo = c;
        }
        total += match end {
            Some(e) => quad::integrate(integrand, lo, e, DEFAULT_REL_TOL)?.value,
            None => quad::integrate_to_infinity(integrand, lo, DEFAULT_REL_TOL)?.value,
        };
        Ok(total)
    }

    /// `∫_r^∞ |k(u)| du`
    pub fn l1_tail(&self, r: f64) -> Result<f64> {
        self.tail_integral(r, Norm::L1)
    }

    /// `∫_r^∞ k(u)² du`
    pub fn l2_tail_sq(&self, r: f64) -> Result<f64> {
        self.tail_integral(r, Norm::L2Squared)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Zero => write!(f, "zero"),
            Kernel::Constant { level } => write!(f, "constant({level})"),
            Kernel::Exponential { alpha } => write!(f, "exponential(alpha={alpha})"),
            Kernel::Bjerksund { a, b, alpha } => write!(f, "bjerksund(a={a}, b={b}, alpha={alpha})"),
            Kernel::PowerFbm { hurst } => write!(f, "power_fbm(H={hurst})"),
            Kernel::RegularizedFbm { hurst, epsilon } => write!(f, "regularized_fbm(H={hurst}, eps={epsilon})"),
            Kernel::Shifted { base, offset } => write!(f, "{base} shifted by {offset}"),
            Kernel::Truncated { base, support } => write!(f, "{base} truncated at {support}"),
        }
    }
}

pub fn tail_norms(drift: &Kernel, vol: &Kernel, r: f64) -> Result<TailNorms> {
    Ok(TailNorms {
        l1_tail: drift.l1_tail(r)?,
        l2_tail_sq: vol.l2_tail_sq(r)?,
        horizon: r,
    })
}

/// Smallest history length `r` with `l1_tail(r)² + l2_tail_sq(r) <= tol²`.
///
/// Bisection stops once the bracket is resolved to `tol * 1e-2` in the
/// (square-root) norm; the upper end of the bracket is returned.
pub fn truncation_horizon(drift: &Kernel, vol: &Kernel, tol: f64) -> Result<f64> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::arg(format!("tolerance must be > 0, got {tol}")));
    }
    let target = tol * tol;
    let norm = |r: f64| tail_norms(drift, vol, r).map(|t| t.combined());

    let at_zero = norm(0.0)?;
    if at_zero <= target {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut lo_norm = at_zero;
    let mut hi = 1.0;
    let mut hi_norm = norm(hi)?;
    while hi_norm > target {
        lo = hi;
        lo_norm = hi_norm;
        hi *= 2.0;
        if hi > 1e15 {
            return Err(Error::Divergent(format!("no horizon below {hi} reaches tolerance {tol}")));
        }
        hi_norm = norm(hi)?;
    }
    let resolution = tol * 1e-2;
    while lo_norm.sqrt() - hi_norm.sqrt() > resolution && hi - lo > 1e-12 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        let m = norm(mid)?;
        if m <= target {
            hi = mid;
            hi_norm = m;
        } else {
            lo = mid;
            lo_norm = m;
        }
    }
    Ok(hi)
}

/// Error of replacing `u^{H-1/2}` by its regularization on `[0, ε]`.
pub fn fbm_regularization_error(hurst: f64, epsilon: f64) -> Result<FbmRegularization> {
    check_hurst(hurst)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::arg(format!("regularization length must be > 0, got {epsilon}")));
    }
    let bound = (2.0 + 1.0 / hurst) * epsilon.powf(2.0 * hurst);
    let cap = epsilon.powf(hurst - 0.5);

    let exact = if hurst < 0.5 {
        // u = ε v^q with q = 1/(2H) removes the u^{2H-1} endpoint singularity
        let q = 1.0 / (2.0 * hurst);
        let f = |v: f64| {
            if v == 0.0 {
                return 0.0;
            }
            let u = epsilon * v.powf(q);
            let d = u.powf(hurst - 0.5) - cap;
            d * d * epsilon * q * v.powf(q - 1.0)
        };
        quad::integrate(f, 0.0, 1.0, DEFAULT_REL_TOL)?.value
    } else {
        let f = |u: f64| {
            let d = u.powf(hurst - 0.5) - cap;
            d * d
        };
        quad::integrate(f, 0.0, epsilon, DEFAULT_REL_TOL)?.value
    };
    Ok(FbmRegularization { bound, exact })
}
