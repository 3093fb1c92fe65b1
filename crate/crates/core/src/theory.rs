//! Vulnerable-edge model: which benign positions a colluding fraction
//! `alpha` of clients can push across the selection boundary in one round,
//! and how likely a manipulated edge is to fall in that range when its
//! position follows a discretised Gaussian.
//!
//! With `n` edges, sparsity `k` and malicious fraction `alpha`, an edge at
//! benign position `p` can be flipped when
//!
//! ```text
//! (k n - alpha (n - 1)) / (1 - alpha)  <=  p  <  k n / (1 - alpha)
//! ```
//!
//! The bounds only need field arithmetic, so [`vulnerable_range`] is generic
//! over [`OrderedField`] and works with exact rationals as well as floats.

use num_traits::{FromPrimitive, Num};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FrlError, Result};
use crate::scalar::Real;

/// Ordered field with integer embedding: `f32`, `f64`, `Ratio<i64>`, ...
pub trait OrderedField: Num + PartialOrd + Clone + FromPrimitive {}

impl<T: Num + PartialOrd + Clone + FromPrimitive> OrderedField for T {}

fn count<T: OrderedField>(n: usize) -> T {
    T::from_usize(n).expect("count representable in the scalar type")
}

/// Parameters of the position model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams<T> {
    /// Fraction of edges kept, in `(0, 1]`.
    pub k: T,
    /// Malicious fraction, in `[0, 1)`.
    pub alpha: T,
    /// Edges per layer.
    pub n: usize,
    /// Mean position of manipulated edges.
    pub mu: T,
    /// Position standard deviation.
    pub sigma: T,
    /// Clients per round.
    pub clients: usize,
}

impl<T: OrderedField> TheoryParams<T> {
    /// Parameters with the mean placed at the boundary, `mu = k n`.
    pub fn at_boundary(k: T, alpha: T, n: usize, sigma: T, clients: usize) -> Self {
        let mu = k.clone() * count::<T>(n);
        Self {
            k,
            alpha,
            n,
            mu,
            sigma,
            clients,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_range_inputs(&self.k, &self.alpha, self.n)?;
        if !(self.sigma > T::zero()) {
            return Err(FrlError::Parameter("sigma must be positive".into()));
        }
        Ok(())
    }
}

fn check_range_inputs<T: OrderedField>(k: &T, alpha: &T, n: usize) -> Result<()> {
    if !(*k > T::zero() && *k <= T::one()) {
        return Err(FrlError::Parameter("k must lie in (0, 1]".into()));
    }
    if !(*alpha >= T::zero() && *alpha < T::one()) {
        return Err(FrlError::Parameter("alpha must lie in [0, 1)".into()));
    }
    if n < 2 {
        return Err(FrlError::Parameter("need at least two edges".into()));
    }
    Ok(())
}

/// Half-open interval `[lower, upper)` of benign positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VulnerableRange<T> {
    pub lower: T,
    pub upper: T,
}

impl<T: OrderedField> VulnerableRange<T> {
    pub fn contains(&self, position: &T) -> bool {
        *position >= self.lower && *position < self.upper
    }

    pub fn width(&self) -> T {
        self.upper.clone() - self.lower.clone()
    }

    pub fn is_empty(&self) -> bool {
        self.lower >= self.upper
    }

    fn clamp(self, n: usize) -> Self {
        let hi = count::<T>(n);
        let c = |v: T| {
            if v < T::zero() {
                T::zero()
            } else if v > hi {
                hi.clone()
            } else {
                v
            }
        };
        Self {
            lower: c(self.lower),
            upper: c(self.upper),
        }
    }
}

/// Raw bounds before clamping; `upper - lower = alpha (n - 1) / (1 - alpha)`.
pub fn vulnerable_range_unclamped<T: OrderedField>(k: T, alpha: T, n: usize) -> Result<VulnerableRange<T>> {
    check_range_inputs(&k, &alpha, n)?;
    let nn = count::<T>(n);
    let kn = k * nn.clone();
    let honest = T::one() - alpha.clone();
    let lower = (kn.clone() - alpha * (nn - T::one())) / honest.clone();
    let upper = kn / honest;
    Ok(VulnerableRange { lower, upper })
}

/// Vulnerable range clamped to `[0, n]`.
pub fn vulnerable_range<T: OrderedField>(k: T, alpha: T, n: usize) -> Result<VulnerableRange<T>> {
    vulnerable_range_unclamped(k, alpha, n).map(|r| r.clamp(n))
}

/// Idealised one-round outcome for an ascending edge at benign position
/// `position`: honest clients contribute `(U - m) * position`, attackers
/// contribute 0, and the edge ends up below the boundary iff the total is
/// below `U k n`.
pub fn ascending_edge_crosses<T: OrderedField>(position: usize, n: usize, k: T, clients: usize, malicious: usize) -> bool {
    let honest = count::<T>(clients - malicious);
    honest * count::<T>(position) < count::<T>(clients) * k * count::<T>(n)
}

/// Idealised outcome for a descending edge: attackers contribute `n - 1`
/// each and the edge rises to the boundary iff the total reaches `U k n`.
pub fn descending_edge_crosses<T: OrderedField>(position: usize, n: usize, k: T, clients: usize, malicious: usize) -> bool {
    let honest = count::<T>(clients - malicious);
    let pushed = count::<T>(malicious) * count::<T>(n - 1);
    honest * count::<T>(position) + pushed >= count::<T>(clients) * k * count::<T>(n)
}

// Abramowitz & Stegun 7.1.26 rational approximation of erfc on x >= 0,
// absolute error <= 1.5e-7. The coefficients sum to 0.999999999; dividing by
// that sum makes erfc(0) = 1 exactly (so Φ(0) = 1/2) and moves the result by
// at most 1e-9.
const ERF_P: f64 = 0.327_591_1;
const ERF_A: [f64; 5] = [
    0.254_829_592,
    -0.284_496_736,
    1.421_413_741,
    -1.453_152_027,
    1.061_405_429,
];

fn erfc_nonneg<T: Real>(x: T) -> T {
    let t = T::one() / (T::one() + T::lit(ERF_P) * x);
    let poly = ERF_A.iter().rev().fold(T::zero(), |acc, &a| (acc + T::lit(a)) * t);
    let norm = ERF_A.iter().rev().fold(T::zero(), |acc, &a| acc + T::lit(a));
    poly / norm * (-(x * x)).exp()
}

/// Standard normal CDF. Symmetric by construction: `Φ(x) + Φ(-x) = 1` up to
/// one rounding.
pub fn normal_cdf<T: Real>(x: T) -> T {
    if x.is_nan() {
        return x;
    }
    let half = T::lit(0.5);
    let tail = half * erfc_nonneg(x.abs() / T::lit(std::f64::consts::SQRT_2));
    if x >= T::zero() {
        T::one() - tail
    } else {
        tail
    }
}

/// Closed-form probability that a manipulated edge lands in the vulnerable
/// range, clamped to `[0, 1]`.
pub fn success_probability<T: Real>(p: &TheoryParams<T>) -> Result<T> {
    p.validate()?;
    let two = T::lit(2.0);
    let one = T::one();
    let kn = p.k * T::from_count(p.n);
    let honest = one - p.alpha;
    let denom = two * honest * p.sigma;
    let upper = (two * kn + honest * (one - two * p.mu)) / denom;
    let lower = (two * kn - two * p.alpha * T::from_count(p.n - 1) - honest * (one + two * p.mu)) / denom;
    let prob = normal_cdf(upper) - normal_cdf(lower);
    Ok(prob.max(T::zero()).min(one))
}

/// Gaussian discretised on unit cells and truncated to `[0, n)`:
/// `P(X = z) ∝ Φ((z + 1/2 - μ)/σ) - Φ((z - 1/2 - μ)/σ)`.
#[derive(Clone, Debug)]
pub struct DiscreteGaussian<T> {
    mu: T,
    sigma: T,
    n: usize,
    cdf_lo: T,
    mass: T,
}

impl<T: Real> DiscreteGaussian<T> {
    pub fn new(mu: T, sigma: T, n: usize) -> Result<Self> {
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(FrlError::Parameter(format!("sigma must be positive, got {sigma}")));
        }
        if n == 0 || !mu.is_finite() {
            return Err(FrlError::Parameter("need a finite mean and at least one position".into()));
        }
        let cdf_lo = normal_cdf((T::lit(-0.5) - mu) / sigma);
        let cdf_hi = normal_cdf((T::from_count(n) - T::lit(0.5) - mu) / sigma);
        let mass = cdf_hi - cdf_lo;
        if !(mass > T::zero()) {
            return Err(FrlError::Parameter(format!(
                "no probability mass on [0, {n}) for mean {mu} and sigma {sigma}"
            )));
        }
        Ok(Self {
            mu,
            sigma,
            n,
            cdf_lo,
            mass,
        })
    }

    fn upper_cdf(&self, z: usize) -> T {
        normal_cdf((T::from_count(z) + T::lit(0.5) - self.mu) / self.sigma)
    }

    /// Probability of position `z` (0 outside the support).
    pub fn pmf(&self, z: usize) -> T {
        if z >= self.n {
            return T::zero();
        }
        let below = if z == 0 { self.cdf_lo } else { self.upper_cdf(z - 1) };
        ((self.upper_cdf(z) - below) / self.mass).max(T::zero())
    }

    /// Inverse-CDF draw; the cell CDFs telescope so a binary search over
    /// positions suffices.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = T::lit(rng.random::<f64>());
        let target = self.cdf_lo + u * self.mass;
        let (mut lo, mut hi) = (0usize, self.n - 1);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if self.upper_cdf(mid) > target {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }
}

/// Convenience single draw from a fresh [`DiscreteGaussian`].
pub fn sample_discrete_gaussian<T: Real, R: Rng + ?Sized>(mu: T, sigma: T, n: usize, rng: &mut R) -> Result<usize> {
    Ok(DiscreteGaussian::new(mu, sigma, n)?.sample(rng))
}

/// Monte Carlo estimate with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub trials: usize,
}

const MC_SHARD: usize = 8192;

/// Fraction of sampled positions that fall inside the vulnerable range.
///
/// Trials are split into fixed-size shards, each with its own ChaCha stream
/// derived from `seed`; the result does not depend on thread scheduling.
pub fn mc_crossing_probability(p: &TheoryParams<f64>, trials: usize, seed: u64) -> Result<McEstimate> {
    p.validate()?;
    if trials == 0 {
        return Err(FrlError::Parameter("trials must be positive".into()));
    }
    let range = vulnerable_range(p.k, p.alpha, p.n)?;
    let dist = DiscreteGaussian::new(p.mu, p.sigma, p.n)?;
    let shards = trials.div_ceil(MC_SHARD);
    let hits: usize = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let todo = MC_SHARD.min(trials - s * MC_SHARD);
            (0..todo)
                .filter(|_| range.contains(&(dist.sample(&mut rng) as f64)))
                .count()
        })
        .sum();
    let est = hits as f64 / trials as f64;
    Ok(McEstimate {
        estimate: est,
        stderr: (est * (1.0 - est) / trials as f64).sqrt(),
        trials,
    })
}

/// One row of a theory sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub alpha: f64,
    pub sigma: f64,
    pub n: usize,
    pub k: f64,
    pub lower: f64,
    pub upper: f64,
    pub p_formula: f64,
    pub p_mc: f64,
    pub stderr: f64,
}

/// Evaluates the closed form and the Monte Carlo estimate on every
/// `(n, sigma, alpha)` combination, with `mu = k n`. Rows are ordered by
/// `n`, then `sigma`, then `alpha`, as given.
pub fn theory_grid(
    alphas: &[f64],
    sigmas: &[f64],
    ns: &[usize],
    k: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<TheoryRow>> {
    let mut rows = Vec::with_capacity(alphas.len() * sigmas.len() * ns.len());
    for (ni, &n) in ns.iter().enumerate() {
        for (si, &sigma) in sigmas.iter().enumerate() {
            for (ai, &alpha) in alphas.iter().enumerate() {
                let p = TheoryParams::at_boundary(k, alpha, n, sigma, 0);
                let range = vulnerable_range(k, alpha, n)?;
                let cell_seed = seed ^ ((ni as u64) << 40 | (si as u64) << 20 | ai as u64);
                let mc = mc_crossing_probability(&p, trials, cell_seed)?;
                rows.push(TheoryRow {
                    alpha,
                    sigma,
                    n,
                    k,
                    lower: range.lower,
                    upper: range.upper,
                    p_formula: success_probability(&p)?,
                    p_mc: mc.estimate,
                    stderr: mc.stderr,
                });
            }
        }
    }
    Ok(rows)
}
