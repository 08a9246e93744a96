use serde::Serialize;

use super::product::{Cocycle, ProductBounds, ScaledProduct};
use super::spec::Generator;
use crate::dynamics::BaseKind;
use crate::error::{Error, Result};
use crate::linalg;
use crate::par::try_par_map;

/// Sampling parameters shared by the finite-horizon estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sampling {
    pub horizon: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Sampling {
    pub fn new(horizon: usize, samples: usize, seed: u64) -> Self {
        Sampling { horizon, samples, seed }
    }
}

/// Fekete data at one horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizonBound {
    pub n: usize,
    /// `max over samples of log |A^n|`.
    pub max_log_norm: f64,
    /// `min over samples of log m(A^n)`, through the inverse cocycle.
    pub min_log_mininorm: f64,
}

/// Exact exponents of the unique invariant measure of a periodic orbit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeriodicExponents {
    pub period: usize,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentReport {
    /// `min_k a_k / k`: one-sided certificate up to sampling error.
    pub lambda_plus_upper: f64,
    /// Exact for periodic bases, `a_n / n` otherwise.
    pub lambda_plus_est: f64,
    /// `max_k b_k / k`.
    pub lambda_minus_lower: f64,
    pub lambda_minus_est: f64,
    /// `a_n / n` and `b_n / n` at the full horizon.
    pub finite_horizon_plus: f64,
    pub finite_horizon_minus: f64,
    pub horizon: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub schedule: Vec<HorizonBound>,
    pub periodic: Option<PeriodicExponents>,
}

impl ExponentReport {
    pub fn gap(&self) -> f64 {
        self.lambda_plus_est - self.lambda_minus_est
    }
}

/// `1, 2, 4, ...` up to and including `n`.
pub fn doubling_schedule(n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut k = 1;
    while k < n {
        out.push(k);
        k *= 2;
    }
    out.push(n);
    out
}

/// Best subadditive (Fekete) upper bound `min_k a_k / k` after each horizon.
pub fn fekete_upper(values: &[(usize, f64)]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    values
        .iter()
        .map(|&(k, a)| {
            best = best.min(a / k as f64);
            best
        })
        .collect()
}

impl<G: Generator> Cocycle<G> {
    /// Uniform exponents from sampled norms of products.
    pub fn estimate_exponents(&self, sampling: &Sampling) -> Result<ExponentReport> {
        if sampling.horizon < 2 || sampling.samples == 0 {
            return Err(Error::InvalidInput("exponent estimation needs horizon >= 2 and samples >= 1".into()));
        }
        let schedule = doubling_schedule(sampling.horizon);
        let n = sampling.horizon as i64;
        let points = self.base.sample_points(sampling.samples, sampling.seed);
        let per_point = try_par_map(&points, |x| {
            let mut fwd = vec![f64::NEG_INFINITY; schedule.len()];
            let mut bwd = vec![f64::NEG_INFINITY; schedule.len()];
            for (sign, out) in [(1i64, &mut fwd), (-1, &mut bwd)] {
                let mut acc = ScaledProduct::identity(self.dim());
                let mut idx = 0;
                self.walk(x, sign * n, |k, a| {
                    acc.push_left(a)?;
                    if schedule[idx] == k {
                        out[idx] = acc.log_norm();
                        idx += 1;
                    }
                    Ok(())
                })?;
            }
            Ok((fwd, bwd))
        })?;
        let mut bounds = Vec::with_capacity(schedule.len());
        for (i, &k) in schedule.iter().enumerate() {
            let max_log_norm = per_point.iter().map(|p| p.0[i]).fold(f64::NEG_INFINITY, f64::max);
            // The inverse cocycle over F^{-1} has products A^{-k}; its
            // top exponent is minus the bottom exponent of A.
            let min_log_mininorm = -per_point.iter().map(|p| p.1[i]).fold(f64::NEG_INFINITY, f64::max);
            bounds.push(HorizonBound { n: k, max_log_norm, min_log_mininorm });
        }
        let plus: Vec<(usize, f64)> = bounds.iter().map(|b| (b.n, b.max_log_norm)).collect();
        let minus: Vec<(usize, f64)> = bounds.iter().map(|b| (b.n, -b.min_log_mininorm)).collect();
        let lambda_plus_upper = *fekete_upper(&plus).last().expect("non-empty schedule");
        let lambda_minus_lower = -*fekete_upper(&minus).last().expect("non-empty schedule");
        let last = bounds.last().expect("non-empty schedule");
        let finite_horizon_plus = last.max_log_norm / last.n as f64;
        let finite_horizon_minus = last.min_log_mininorm / last.n as f64;

        let periodic = match self.base.kind {
            BaseKind::PeriodicOrbit { .. } => Some(self.periodic_exponents()?),
            _ => None,
        };
        let (lambda_plus_est, lambda_minus_est) = match &periodic {
            Some(p) => (p.lambda_plus, p.lambda_minus),
            None => (finite_horizon_plus, finite_horizon_minus),
        };
        Ok(ExponentReport {
            lambda_plus_upper,
            lambda_plus_est,
            lambda_minus_lower,
            lambda_minus_est,
            finite_horizon_plus,
            finite_horizon_minus,
            horizon: sampling.horizon,
            sample_count: points.len(),
            seed: sampling.seed,
            schedule: bounds,
            periodic,
        })
    }

    /// `(1/p) log` of the largest and smallest eigenvalue moduli of the
    /// return map `A^p`. Both come from a dominant eigenvalue (of the
    /// forward and of the backward return map) for accuracy.
    pub fn periodic_exponents(&self) -> Result<PeriodicExponents> {
        let period = self
            .base
            .period()
            .ok_or_else(|| Error::InvalidInput("exact exponents need a periodic base".into()))?;
        let x = &self.base.sample_points(1, 0)[0];
        let spectral = |p: ScaledProduct| -> Result<f64> {
            let rho = linalg::eigenvalues(p.matrix())?.iter().map(|z| z.norm()).fold(0.0, f64::max);
            Ok(p.log_scale() + rho.ln())
        };
        let p = period as i64;
        let lambda_plus = spectral(self.product(x, p)?)? / period as f64;
        let lambda_minus = -spectral(self.product(x, -p)?)? / period as f64;
        Ok(PeriodicExponents { period, lambda_plus, lambda_minus })
    }

    /// `max |A^k|` and `min m(A^k)` over samples and `1 <= |k| <= horizon`.
    pub fn product_bounded_diagnostic(&self, sampling: &Sampling) -> Result<ProductBounds> {
        let points = self.base.sample_points(sampling.samples, sampling.seed);
        let n = sampling.horizon as i64;
        let per_point = try_par_map(&points, |x| {
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            for sign in [1i64, -1] {
                let mut acc = ScaledProduct::identity(self.dim());
                // Inverse of the product, accumulated on the right, so the
                // mininorm is read off as a top singular value.
                let mut inv = ScaledProduct::identity(self.dim());
                self.walk(x, sign * n, |_, a| {
                    acc.push_left(a)?;
                    inv.push_right(&linalg::inverse(a)?)?;
                    hi = hi.max(acc.log_norm());
                    lo = lo.min(-inv.log_norm());
                    Ok(())
                })?;
            }
            Ok((hi, lo))
        })?;
        let log_sup_norm = per_point.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let log_inf_mininorm = per_point.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        Ok(ProductBounds {
            sup_norm: log_sup_norm.exp(),
            inf_mininorm: log_inf_mininorm.exp(),
            log_sup_norm,
            log_inf_mininorm,
            horizon: sampling.horizon,
            sample_count: points.len(),
        })
    }
}
