//! Truncated Lyapunov inner products as Gram-matrix fields.
//!
//! `R(x) = sum_{|n| <= N} exp(-2 eps |n|) (A^n(x))^T A^n(x)` and the pushed
//! forward field `Q(x) = A(x)^T R(F x) A(x)`.

use serde::Serialize;

use crate::cocycle::{Cocycle, Generator, ScaledProduct};
use crate::dynamics::BasePoint;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, PositiveMatrix, SymmetricMatrix};
use crate::par::try_par_map;

/// Number of consecutive non-decreasing terms after which the series is
/// declared divergent.
pub const DIVERGENCE_RUN: usize = 50;

/// Where the two-sided series is cut.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    Fixed(usize),
    /// Stop once the newest terms are below `tau` times the smallest
    /// eigenvalue of the partial sum.
    Adaptive { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormConfig {
    pub epsilon: f64,
    pub truncation: Truncation,
    /// Hard cap on `N` for the adaptive rule.
    pub max_terms: usize,
    /// Use one common truncation for every Gram matrix entering a
    /// comparison.
    pub strict: bool,
}

impl NormConfig {
    pub const DEFAULT_TAU: f64 = 1e-8;
    pub const DEFAULT_MAX_TERMS: usize = 20_000;

    pub fn new(epsilon: f64, truncation: Truncation) -> Result<Self> {
        let cfg = NormConfig { epsilon, truncation, max_terms: Self::DEFAULT_MAX_TERMS, strict: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adaptive(epsilon: f64) -> Result<Self> {
        NormConfig::new(epsilon, Truncation::Adaptive { tau: Self::DEFAULT_TAU })
    }

    pub fn fixed(epsilon: f64, n: usize) -> Result<Self> {
        NormConfig::new(epsilon, Truncation::Fixed(n))
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        self.epsilon = epsilon;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        match self.truncation {
            Truncation::Fixed(0) => Err(Error::InvalidInput("fixed truncation needs N >= 1".into())),
            Truncation::Adaptive { tau } if !(tau > 0.0 && tau < 1.0) => {
                Err(Error::InvalidInput(format!("tail tolerance must lie in (0, 1), got {tau}")))
            }
            _ if self.max_terms == 0 => Err(Error::InvalidInput("max_terms must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// `kappa_N(eps) = 1 + 2 sum_{n=1}^N exp(-2 eps n)`, the Gram scale of an
/// isometric cocycle.
pub fn isometric_gram_scale(epsilon: f64, n: usize) -> f64 {
    let r = (-2.0 * epsilon).exp();
    1.0 + 2.0 * r * (1.0 - r.powi(n as i32)) / (1.0 - r)
}

/// A Gram matrix attached to a base point.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSample {
    pub point: BasePoint,
    pub gram: PositiveMatrix,
    pub truncation_used: usize,
    /// Norm of the last included term, a heuristic proxy for the omitted
    /// tail. For `Q` this is already pushed through `A`.
    pub tail_bound: f64,
}

impl MetricSample {
    /// `|||v|||^2 = v^T G v`.
    pub fn quadratic(&self, v: &nalgebra::DVector<f64>) -> f64 {
        v.dot(&(self.gram.matrix() * v))
    }
}

/// `R(x)`, `R(Fx)` and `Q(x)` with a consistent truncation policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricPair {
    pub generator_value: Matrix,
    pub r: MetricSample,
    pub r_next: MetricSample,
    pub q: MetricSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlmostInvariance {
    pub holds: bool,
    /// Smallest eigenvalue of `Q - exp(-2 eps) R`.
    pub lower_margin: f64,
    /// Smallest eigenvalue of `exp(2 eps) R - Q`.
    pub upper_margin: f64,
    /// Allowance for truncation: the sum of both tail bounds.
    pub tolerance: f64,
}

/// `exp(-2 eps |n|) (A^n)^T A^n` for a scaled product, with its norm.
fn weighted_term(p: &ScaledProduct, epsilon: f64, n: usize) -> (Matrix, f64) {
    let w = (2.0 * p.log_scale() - 2.0 * epsilon * n as f64).exp();
    let m = p.matrix();
    (m.transpose() * m * w, w)
}

impl<G: Generator> Cocycle<G> {
    /// `R(point)` under `cfg.truncation`, ignoring `cfg.strict`.
    pub fn gram_r(&self, cfg: &NormConfig, point: &BasePoint) -> Result<MetricSample> {
        cfg.validate()?;
        let d = self.dim();
        let eps = cfg.epsilon;
        let (limit, tau) = match cfg.truncation {
            Truncation::Fixed(n) => (n, None),
            Truncation::Adaptive { tau } => (cfg.max_terms, Some(tau)),
        };
        let mut sum = Matrix::identity(d, d);
        let mut fwd = ScaledProduct::identity(d);
        let mut bwd = ScaledProduct::identity(d);
        let mut x_fwd = point.clone();
        let mut x_bwd = point.clone();
        let mut last = f64::INFINITY;
        let mut rising = 0;
        for n in 1..=limit {
            if n > 1 {
                x_fwd = self.step(&x_fwd)?;
            }
            fwd.push_left(&self.evaluate(&x_fwd)?)?;
            x_bwd = self.base.step_back(&x_bwd)?;
            bwd.push_left(&linalg::inverse(&self.evaluate(&x_bwd)?)?)?;
            let (tf, nf) = weighted_term(&fwd, eps, n);
            let (tb, nb) = weighted_term(&bwd, eps, n);
            let term = nf.max(nb);
            if !term.is_finite() {
                return Err(Error::SeriesDivergence { epsilon: eps, term: n, terms: limit });
            }
            sum += tf + tb;
            rising = if term >= last && term > 0.0 { rising + 1 } else { 0 };
            if rising >= DIVERGENCE_RUN {
                return Err(Error::SeriesDivergence { epsilon: eps, term: n, terms: limit });
            }
            last = term;
            if let Some(tau) = tau {
                let partial = SymmetricMatrix::new(sum.clone())?;
                if term <= tau * partial.min_eigenvalue() {
                    return Ok(MetricSample {
                        point: point.clone(),
                        gram: PositiveMatrix::new(partial)?,
                        truncation_used: n,
                        tail_bound: term,
                    });
                }
            } else if n == limit {
                return Ok(MetricSample {
                    point: point.clone(),
                    gram: PositiveMatrix::from_matrix(sum)?,
                    truncation_used: n,
                    tail_bound: term,
                });
            }
        }
        Err(Error::SeriesDivergence { epsilon: eps, term: limit, terms: limit })
    }

    /// `R(x)`, `R(Fx)` and `Q(x)`. In strict mode both Gram matrices are
    /// recomputed with the larger of the two adaptive truncations.
    pub fn metric_pair(&self, cfg: &NormConfig, point: &BasePoint) -> Result<MetricPair> {
        let a = self.evaluate(point)?;
        let next = self.step(point)?;
        let mut r = self.gram_r(cfg, point)?;
        let mut r_next = self.gram_r(cfg, &next)?;
        if cfg.strict && r.truncation_used != r_next.truncation_used {
            let common = NormConfig {
                truncation: Truncation::Fixed(r.truncation_used.max(r_next.truncation_used)),
                ..*cfg
            };
            r = self.gram_r(&common, point)?;
            r_next = self.gram_r(&common, &next)?;
        }
        let q_matrix = a.transpose() * r_next.gram.matrix() * &a;
        let a_norm = linalg::operator_norm(&a)?;
        let q = MetricSample {
            point: point.clone(),
            gram: PositiveMatrix::from_matrix(q_matrix)?,
            truncation_used: r_next.truncation_used,
            tail_bound: a_norm * a_norm * r_next.tail_bound,
        };
        Ok(MetricPair { generator_value: a, r, r_next, q })
    }

    /// `Q(point) = A^T R(F point) A`.
    pub fn gram_q(&self, cfg: &NormConfig, point: &BasePoint) -> Result<MetricSample> {
        Ok(self.metric_pair(cfg, point)?.q)
    }

    /// Gram field over a list of points, evaluated in parallel.
    pub fn gram_field(&self, cfg: &NormConfig, points: &[BasePoint]) -> Result<Vec<MetricPair>> {
        try_par_map(points, |x| self.metric_pair(cfg, x))
    }
}

/// `exp(-2 eps) R < Q < exp(2 eps) R`, up to the truncation allowance.
pub fn check_almost_invariance(r: &MetricSample, q: &MetricSample, epsilon: f64) -> Result<AlmostInvariance> {
    if r.gram.dim() != q.gram.dim() {
        return Err(Error::DimensionMismatch { expected: r.gram.dim(), found: q.gram.dim() });
    }
    if r.point != q.point {
        return Err(Error::InvalidInput("almost-invariance compares Gram matrices at different points".into()));
    }
    let rs = r.gram.symmetric();
    let qs = q.gram.symmetric();
    let lower = linalg::loewner_less(&rs.scale((-2.0 * epsilon).exp()), qs)?;
    let upper = linalg::loewner_less(qs, &rs.scale((2.0 * epsilon).exp()))?;
    let tolerance = r.tail_bound + q.tail_bound;
    Ok(AlmostInvariance {
        holds: lower.margin > -tolerance && upper.margin > -tolerance,
        lower_margin: lower.margin,
        upper_margin: upper.margin,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::{CocycleSpec, TrigPoly};
    use crate::dynamics::BaseDynamics;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shear() -> Matrix {
        Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])
    }

    fn fixed() -> BasePoint {
        BasePoint::Periodic { index: 0, period: 1 }
    }

    fn shear_cocycle() -> Cocycle<CocycleSpec> {
        Cocycle::new(CocycleSpec::constant(shear()).unwrap(), BaseDynamics::fixed_point()).unwrap()
    }

    /// Naive oracle: `sum exp(-2 eps |n|) |A^n v|^2` with plain products.
    fn direct_quadratic<G: Generator>(c: &Cocycle<G>, x: &BasePoint, eps: f64, n: usize, v: &DVector<f64>) -> f64 {
        let mut total = v.norm_squared();
        for k in 1..=n as i64 {
            for s in [k, -k] {
                let p = c.product(x, s).unwrap().to_matrix();
                total += (-2.0 * eps * k as f64).exp() * (p * v).norm_squared();
            }
        }
        total
    }

    #[test]
    fn isometric_cocycles_have_scalar_gram() {
        let eps = 0.5;
        let kappa: f64 = 1.0 + 2.0 * (1..=20).map(|n| (-2.0 * eps * n as f64).exp()).sum::<f64>();
        assert_relative_eq!(isometric_gram_scale(eps, 20), kappa, epsilon = 1e-13);
        let cfg = NormConfig::fixed(eps, 20).unwrap();
        for spec in [CocycleSpec::rotation(0.7), CocycleSpec::constant(Matrix::identity(2, 2)).unwrap()] {
            let c = Cocycle::new(spec, BaseDynamics::golden_rotation()).unwrap();
            let r = c.gram_r(&cfg, &BasePoint::Torus(vec![0.2])).unwrap();
            assert_relative_eq!(r.gram.matrix().clone(), Matrix::identity(2, 2) * kappa, epsilon = 1e-12);
            assert_eq!(r.truncation_used, 20);
        }
        assert_relative_eq!(isometric_gram_scale(0.3, 5000), 1.0 / 0.3f64.tanh(), epsilon = 1e-12);
    }

    #[test]
    fn rotation_q_equals_r_with_known_margins() {
        let eps = 0.5;
        let c = Cocycle::new(CocycleSpec::rotation(0.4), BaseDynamics::golden_rotation()).unwrap();
        let pair = c.metric_pair(&NormConfig::fixed(eps, 20).unwrap(), &BasePoint::Torus(vec![0.6])).unwrap();
        assert_relative_eq!(pair.q.gram.matrix().clone(), pair.r.gram.matrix().clone(), epsilon = 1e-12);
        let chk = check_almost_invariance(&pair.r, &pair.q, eps).unwrap();
        let kappa = isometric_gram_scale(eps, 20);
        assert!(chk.holds);
        assert_relative_eq!(chk.lower_margin, kappa * (1.0 - (-2.0 * eps).exp()), epsilon = 1e-11);
        assert_relative_eq!(chk.upper_margin, kappa * ((2.0 * eps).exp() - 1.0), epsilon = 1e-11);
    }

    #[test]
    fn adaptive_shear_gram_matches_long_direct_sum() {
        let c = shear_cocycle();
        let eps = 0.5;
        let r = c.gram_r(&NormConfig::adaptive(eps).unwrap(), &fixed()).unwrap();
        let n = r.truncation_used;
        // Oracle: brute-force summation of the entries at 4N terms.
        let mut direct = Matrix::identity(2, 2);
        for k in 1..=(4 * n) as i64 {
            for s in [k, -k] {
                let p = c.product(&fixed(), s).unwrap().to_matrix();
                direct += p.transpose() * p * (-2.0 * eps * k as f64).exp();
            }
        }
        let rel = (r.gram.matrix() - &direct).norm() / direct.norm();
        assert!(rel < 1e-7, "relative gap {rel}");
        assert!(r.tail_bound <= 1e-8 * r.gram.min_eigenvalue());
    }

    #[test]
    fn shear_q_is_the_pushed_forward_norm() {
        let c = shear_cocycle();
        let eps = 0.5;
        let cfg = NormConfig::adaptive(eps).unwrap();
        let pair = c.metric_pair(&cfg, &fixed()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let v = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let av = shear() * &v;
            let pushed = direct_quadratic(&c, &fixed(), eps, pair.r_next.truncation_used, &av);
            assert_relative_eq!(pair.q.quadratic(&v), pushed, max_relative = 1e-9);
        }
        assert!(check_almost_invariance(&pair.r, &pair.q, eps).unwrap().holds);
    }

    #[test]
    fn shear_almost_invariance_in_the_long_limit() {
        let c = shear_cocycle();
        for eps in [0.5, 0.2, 0.1, 0.05] {
            let cfg = NormConfig::fixed(eps, 3000).unwrap();
            let pair = c.metric_pair(&cfg, &fixed()).unwrap();
            let chk = check_almost_invariance(&pair.r, &pair.q, eps).unwrap();
            assert!(chk.holds && chk.lower_margin > 0.0 && chk.upper_margin > 0.0, "{eps}: {chk:?}");
        }
    }

    #[test]
    fn hyperbolic_cocycle_with_small_epsilon_diverges() {
        let a = Matrix::from_diagonal(&nalgebra::dvector![2.0, 0.5]);
        let c = Cocycle::new(CocycleSpec::constant(a).unwrap(), BaseDynamics::fixed_point()).unwrap();
        let err = c.gram_r(&NormConfig::adaptive(0.1).unwrap(), &fixed()).unwrap_err();
        assert!(matches!(err, Error::SeriesDivergence { .. }));
    }

    #[test]
    fn quadratic_form_unrolls_to_direct_sum() {
        let spec = CocycleSpec::schrodinger(1.1, 0.4);
        let c = Cocycle::new(spec, BaseDynamics::golden_rotation()).unwrap();
        let x = BasePoint::Torus(vec![0.37]);
        let eps = 0.8;
        let r = c.gram_r(&NormConfig::fixed(eps, 25).unwrap(), &x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let v = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            assert_relative_eq!(r.quadratic(&v), direct_quadratic(&c, &x, eps, 25, &v), max_relative = 1e-10);
        }
    }

    #[test]
    fn q_telescopes_into_shifted_weights() {
        let spec = CocycleSpec::scalar_times_rotation(TrigPoly::new(0.0, vec![0.1], vec![]), TrigPoly::new(0.3, vec![], vec![1.0]))
            .unwrap();
        let spec = CocycleSpec::conjugated(Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), spec).unwrap();
        let c = Cocycle::new(spec, BaseDynamics::golden_rotation()).unwrap();
        let x = BasePoint::Torus(vec![0.81]);
        let (eps, n) = (0.6, 15i64);
        let q = c.gram_q(&NormConfig::fixed(eps, n as usize).unwrap(), &x).unwrap();
        let mut shifted = Matrix::zeros(2, 2);
        for k in (-n + 1)..=(n + 1) {
            let p = c.product(&x, k).unwrap().to_matrix();
            shifted += p.transpose() * p * (-2.0 * eps * (k - 1).abs() as f64).exp();
        }
        assert_relative_eq!(q.gram.matrix().clone(), shifted, max_relative = 1e-10);
    }

    #[test]
    fn gram_grows_with_truncation() {
        let c = Cocycle::new(CocycleSpec::schrodinger(0.5, 0.2), BaseDynamics::golden_rotation()).unwrap();
        let x = BasePoint::Torus(vec![0.1]);
        let mut prev = c.gram_r(&NormConfig::fixed(1.0, 1).unwrap(), &x).unwrap();
        for n in 2..12 {
            let next = c.gram_r(&NormConfig::fixed(1.0, n).unwrap(), &x).unwrap();
            assert!(linalg::loewner_less(prev.gram.symmetric(), next.gram.symmetric()).unwrap().holds);
            prev = next;
        }
    }

    #[test]
    fn strict_mode_uses_a_common_truncation() {
        let spec = CocycleSpec::schrodinger(0.3, 0.6);
        let c = Cocycle::new(spec, BaseDynamics::golden_rotation()).unwrap();
        let cfg = NormConfig::adaptive(0.9).unwrap().strict(true);
        let pair = c.metric_pair(&cfg, &BasePoint::Torus(vec![0.45])).unwrap();
        assert_eq!(pair.r.truncation_used, pair.r_next.truncation_used);
        assert!(linalg::loewner_less(&SymmetricMatrix::identity(2).scale(1.0 - 1e-12), pair.r.gram.symmetric()).unwrap().holds);
    }

    #[test]
    fn config_validation() {
        assert!(NormConfig::adaptive(0.0).is_err());
        assert!(NormConfig::fixed(0.1, 0).is_err());
        assert!(NormConfig::new(0.1, Truncation::Adaptive { tau: 1.5 }).is_err());
    }
}
