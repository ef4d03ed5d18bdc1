//! Square-integrable Lévy drivers and their sampled increments.

use std::io::{BufRead, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamKey};

/// Jump size law of a compound Poisson driver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JumpLaw {
    Fixed { size: f64 },
    Normal { mean: f64, variance: f64 },
    /// Positive jumps; a compound Poisson subordinator.
    Exponential { mean: f64 },
}

impl JumpLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            JumpLaw::Fixed { size } => size,
            JumpLaw::Normal { mean, .. } | JumpLaw::Exponential { mean } => mean,
        }
    }

    /// `E[J²]`
    pub fn second_moment(&self) -> f64 {
        match *self {
            JumpLaw::Fixed { size } => size * size,
            JumpLaw::Normal { mean, variance } => variance + mean * mean,
            JumpLaw::Exponential { mean } => 2.0 * mean * mean,
        }
    }

    fn is_nonnegative(&self) -> bool {
        match *self {
            JumpLaw::Fixed { size } => size >= 0.0,
            JumpLaw::Normal { variance, mean } => variance == 0.0 && mean >= 0.0,
            JumpLaw::Exponential { .. } => true,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            JumpLaw::Fixed { size } if size.is_finite() => Ok(()),
            JumpLaw::Normal { mean, variance } if mean.is_finite() && variance >= 0.0 && variance.is_finite() => Ok(()),
            JumpLaw::Exponential { mean } if mean > 0.0 && mean.is_finite() => Ok(()),
            other => Err(Error::arg(format!("invalid jump law {other:?}"))),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            JumpLaw::Fixed { size } => size,
            JumpLaw::Normal { mean, variance } => mean + variance.sqrt() * rng.sample::<f64, _>(StandardNormal),
            JumpLaw::Exponential { mean } => mean * rng.sample::<f64, _>(Exp::new(1.0).unwrap()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Driver {
    /// Brownian motion with variance `variance_rate · t`.
    Brownian { variance_rate: f64 },
    /// Inverse Gaussian subordinator, `L(t) ~ IG(δt, γ)`.
    InverseGaussian { delta: f64, gamma: f64, compensated: bool },
    CompoundPoisson { rate: f64, jumps: JumpLaw, compensated: bool },
}

/// Mean and variance rate of a driver: `E[L(1)]` and `C₁ = Var[L(1)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriverMoments {
    pub mean: f64,
    pub variance: f64,
}

impl DriverMoments {
    /// `E[L(1)²]`
    pub fn second_moment(&self) -> f64 {
        self.variance + self.mean * self.mean
    }
}

impl Driver {
    pub fn brownian(variance_rate: f64) -> Result<Self> {
        let d = Driver::Brownian { variance_rate };
        d.validate()?;
        Ok(d)
    }

    pub fn inverse_gaussian(delta: f64, gamma: f64, compensated: bool) -> Result<Self> {
        let d = Driver::InverseGaussian { delta, gamma, compensated };
        d.validate()?;
        Ok(d)
    }

    pub fn compound_poisson(rate: f64, jumps: JumpLaw, compensated: bool) -> Result<Self> {
        let d = Driver::CompoundPoisson { rate, jumps, compensated };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Driver::Brownian { variance_rate } => {
                if *variance_rate > 0.0 && variance_rate.is_finite() {
                    Ok(())
                } else {
                    Err(Error::arg(format!("Brownian variance rate must be > 0, got {variance_rate}")))
                }
            }
            Driver::InverseGaussian { delta, gamma, .. } => {
                if !(*delta > 0.0 && delta.is_finite()) {
                    return Err(Error::arg(format!("IG delta must be > 0, got {delta}")));
                }
                if !(*gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::arg(format!("IG gamma must be > 0, got {gamma}")));
                }
                Ok(())
            }
            Driver::CompoundPoisson { rate, jumps, .. } => {
                // rate 0 is allowed: the null subordinator
                if !(*rate >= 0.0 && rate.is_finite()) {
                    return Err(Error::arg(format!("jump intensity must be >= 0, got {rate}")));
                }
                jumps.validate()
            }
        }
    }

    pub fn is_compensated(&self) -> bool {
        match self {
            Driver::Brownian { .. } => true,
            Driver::InverseGaussian { compensated, .. } | Driver::CompoundPoisson { compensated, .. } => *compensated,
        }
    }

    /// Mean rate of the uncompensated process.
    fn raw_mean(&self) -> f64 {
        match self {
            Driver::Brownian { .. } => 0.0,
            Driver::InverseGaussian { delta, gamma, .. } => delta / gamma,
            Driver::CompoundPoisson { rate, jumps, .. } => rate * jumps.mean(),
        }
    }

    pub fn moments(&self) -> DriverMoments {
        let variance = match self {
            Driver::Brownian { variance_rate } => *variance_rate,
            Driver::InverseGaussian { delta, gamma, .. } => delta / gamma.powi(3),
            Driver::CompoundPoisson { rate, jumps, .. } => rate * jumps.second_moment(),
        };
        let mean = if self.is_compensated() { 0.0 } else { self.raw_mean() };
        DriverMoments { mean, variance }
    }

    /// The martingale part `M(t) = L(t) - m t`.
    pub fn martingale(&self) -> Driver {
        let mut d = self.clone();
        match &mut d {
            Driver::Brownian { .. } => {}
            Driver::InverseGaussian { compensated, .. } | Driver::CompoundPoisson { compensated, .. } => {
                *compensated = true
            }
        }
        d
    }

    /// True when every uncompensated increment is `>= 0`.
    pub fn is_subordinator(&self) -> bool {
        match self {
            Driver::Brownian { .. } => false,
            Driver::InverseGaussian { compensated, .. } => !compensated,
            Driver::CompoundPoisson { compensated, jumps, rate } => {
                !compensated && (*rate == 0.0 || jumps.is_nonnegative())
            }
        }
    }

    /// Draws one increment over a step of length `dt`.
    pub fn sample_one<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> f64 {
        let raw = match self {
            Driver::Brownian { variance_rate } => (variance_rate * dt).sqrt() * rng.sample::<f64, _>(StandardNormal),
            Driver::InverseGaussian { delta, gamma, .. } => {
                let mean = delta * dt / gamma;
                let shape = (delta * dt) * (delta * dt);
                sample_inverse_gaussian(mean, shape, rng)
            }
            Driver::CompoundPoisson { rate, jumps, .. } => {
                let intensity = rate * dt;
                if intensity == 0.0 {
                    0.0
                } else {
                    let count = Poisson::new(intensity).expect("intensity > 0").sample(rng) as u64;
                    (0..count).map(|_| jumps.sample(rng)).sum()
                }
            }
        };
        if self.is_compensated() {
            raw - self.raw_mean() * dt
        } else {
            raw
        }
    }

    pub fn fill<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.sample_one(dt, rng);
        }
    }

    /// Samples `count` i.i.d. increments `L(t_{n+1}) - L(t_n)` of length `dt`.
    pub fn sample_increments(&self, dt: f64, count: usize, seed: u64, key: StreamKey) -> Result<IncrementStream> {
        self.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::arg(format!("time step must be > 0, got {dt}")));
        }
        if count == 0 {
            return Err(Error::arg("increment count must be >= 1"));
        }
        let mut rng = stream_rng(seed, key);
        let mut values = vec![0.0; count];
        self.fill(dt, &mut rng, &mut values);
        Ok(IncrementStream {
            dt,
            values,
            seed,
            stream: key.label.to_string(),
            index: key.index,
        })
    }
}

/// Inverse Gaussian variate with the given mean and shape.
///
/// Transformation with multiple roots (Michael, Schucany and Haas); the
/// smaller root is written as `4 μ λ y / (y + s)²`, which stays positive
/// when `y ≫ λ` instead of cancelling to zero.
pub fn sample_inverse_gaussian<R: Rng + ?Sized>(mean: f64, shape: f64, rng: &mut R) -> f64 {
    let v: f64 = rng.sample(StandardNormal);
    let y = mean * v * v;
    if y == 0.0 {
        return mean;
    }
    let s = (4.0 * shape * y + y * y).sqrt();
    let denom = y + s;
    let x = 4.0 * mean * shape * y / (denom * denom);
    let u: f64 = rng.random();
    if u <= mean / (mean + x) {
        x
    } else {
        mean * mean / x
    }
}

/// Sampled increments `ΔM⁰ … ΔM^{N-1}` with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct IncrementStream {
    pub dt: f64,
    pub values: Vec<f64>,
    pub seed: u64,
    pub stream: String,
    pub index: u64,
}

const STREAM_MAGIC: &[u8; 8] = b"HSPDEINC";

impl IncrementStream {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// One increment per line, preceded by a `#` provenance line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# dt={:.16e} seed={} stream={} index={}",
            self.dt, self.seed, self.stream, self.index
        )?;
        for v in &self.values {
            writeln!(w, "{v:.16e}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut out = IncrementStream {
            dt: f64::NAN,
            values: Vec::new(),
            seed: 0,
            stream: String::new(),
            index: 0,
        };
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if let Some(header) = line.strip_prefix('#') {
                for field in header.split_whitespace() {
                    let Some((k, v)) = field.split_once('=') else { continue };
                    let bad = |_| Error::Format(format!("line {}: bad {k} value {v:?}", i + 1));
                    match k {
                        "dt" => out.dt = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                        "seed" => out.seed = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                        "index" => out.index = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                        "stream" => out.stream = v.to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let v: f64 = line
                .parse()
                .map_err(|_| Error::Format(format!("line {}: not a number: {line:?}", i + 1)))?;
            out.values.push(v);
        }
        Ok(out)
    }

    /// Little-endian: magic, count (u64), dt, seed, index, label length
    /// (u32) and label bytes, then the increments.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STREAM_MAGIC)?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.index.to_le_bytes())?;
        w.write_all(&(self.stream.len() as u32).to_le_bytes())?;
        w.write_all(self.stream.as_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STREAM_MAGIC {
            return Err(Error::Format("not an increment stream dump".into()));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let count = next_u64(&mut r)? as usize;
        let dt = f64::from_bits(next_u64(&mut r)?);
        let seed = next_u64(&mut r)?;
        let index = next_u64(&mut r)?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let mut label = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut label)?;
        let stream = String::from_utf8(label).map_err(|e| Error::Format(e.to_string()))?;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_bits(next_u64(&mut r)?));
        }
        Ok(IncrementStream { dt, values, seed, stream, index })
    }
}

/// Sample mean and its standard error.
pub(crate) fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
