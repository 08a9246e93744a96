//! Metric-preserving perturbation of a cocycle with subexponential growth.
//!
//! At every point the positive solution `P` of `P^T Q P = R` is computed in
//! closed form; `A P` then maps `R(x)` isometrically onto `R(Fx)`, and
//! conjugating by `R^{1/2}` produces near-isometric and isometric cocycles.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cocycle::{Cocycle, Generator};
use crate::dynamics::BasePoint;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, PositiveMatrix, SymmetricMatrix};
use crate::lyapnorm::{check_almost_invariance, AlmostInvariance, MetricPair, MetricSample, NormConfig};
use crate::par::try_par_map;

/// Random vectors per point in the metric-preservation check.
const PRESERVATION_PROBES: usize = 8;
const PROBE_SEED: u64 = 0x5eed_0001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReductionTolerances {
    /// Bound on `|P^T Q P - R| / |R|`.
    pub invariance_residual: f64,
    /// Bound on `|U^T U - I|`.
    pub orthogonality_defect: f64,
    /// Bound on the relative change of `|||v|||^2` under the perturbed map.
    pub metric_preservation: f64,
}

impl Default for ReductionTolerances {
    fn default() -> Self {
        ReductionTolerances { invariance_residual: 1e-10, orthogonality_defect: 1e-8, metric_preservation: 1e-8 }
    }
}

/// The positive solution of `P^T Q P = R`:
/// `P = Q^{-1/2} (Q^{1/2} R Q^{1/2})^{1/2} Q^{-1/2}`.
pub fn solve_positive(q: &PositiveMatrix, r: &PositiveMatrix) -> Result<PositiveMatrix> {
    if q.dim() != r.dim() {
        return Err(Error::DimensionMismatch { expected: q.dim(), found: r.dim() });
    }
    let qh = q.sqrt();
    let qih = q.inv_sqrt();
    let inner = PositiveMatrix::new(r.symmetric().congruence(qh.matrix())?)?;
    let middle = inner.sqrt();
    PositiveMatrix::new(middle.symmetric().congruence(qih.matrix())?)
}

/// `|P^T Q P - R| / |R|` in the operator norm.
pub fn invariance_residual(p: &Matrix, q: &Matrix, r: &Matrix) -> Result<f64> {
    let diff = p.transpose() * q * p - r;
    Ok(linalg::operator_norm(&diff)? / linalg::operator_norm(r)?)
}

/// The two Loewner steps that bound the spectrum of `P`:
/// `Q^{1/2} R Q^{1/2} < e^{2 eps} Q^2` and its square-root consequence
/// `(Q^{1/2} R Q^{1/2})^{1/2} < e^{eps} Q`, together with the mirror
/// statements from below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProofChain {
    pub holds: bool,
    pub congruence_margin: f64,
    pub sqrt_margin: f64,
}

fn proof_chain(q: &PositiveMatrix, r: &PositiveMatrix, epsilon: f64) -> Result<ProofChain> {
    let qh = q.sqrt();
    let inner = r.symmetric().congruence(qh.matrix())?;
    let q2 = SymmetricMatrix::new(q.matrix() * q.matrix())?;
    let up = linalg::loewner_less(&inner, &q2.scale((2.0 * epsilon).exp()))?;
    let down = linalg::loewner_less(&q2.scale((-2.0 * epsilon).exp()), &inner)?;
    let root = PositiveMatrix::new(inner)?.sqrt();
    let up_root = linalg::loewner_less(root.symmetric(), &q.symmetric().scale(epsilon.exp()))?;
    let down_root = linalg::loewner_less(&q.symmetric().scale((-epsilon).exp()), root.symmetric())?;
    // Margins are normalised by the size of `Q` so they compare across points.
    let congruence_margin = up.margin.min(down.margin) / (q.max_eigenvalue() * q.max_eigenvalue());
    let sqrt_margin = up_root.margin.min(down_root.margin) / q.max_eigenvalue();
    Ok(ProofChain {
        holds: up.holds && down.holds && up_root.holds && down_root.holds,
        congruence_margin,
        sqrt_margin,
    })
}

/// Everything computed at one sampled point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointReduction {
    pub point: BasePoint,
    pub a: Matrix,
    pub r: MetricSample,
    pub r_next: MetricSample,
    pub q: MetricSample,
    pub p: PositiveMatrix,
    /// `A P`.
    pub a_tilde: Matrix,
    /// `R(Fx)^{1/2} A R(x)^{-1/2}`.
    pub b: Matrix,
    /// `R(Fx)^{1/2} A P R(x)^{-1/2}`.
    pub u: Matrix,
    pub residual: f64,
    /// Relative truncation slack `(tail_R + tail_Q) / min eig R`.
    pub slack: f64,
    pub b_singular_values: Vec<f64>,
    pub u_defect: f64,
    pub metric_error: f64,
    pub almost_invariance: AlmostInvariance,
    pub proof_chain: ProofChain,
}

impl PointReduction {
    fn build(pair: MetricPair, epsilon: f64, probe_seed: u64) -> Result<Self> {
        let MetricPair { generator_value: a, r, r_next, q } = pair;
        let p = solve_positive(&q.gram, &r.gram)?;
        let a_tilde = &a * p.matrix();
        let rh_next = r_next.gram.sqrt();
        let rih = r.gram.inv_sqrt();
        let b = rh_next.matrix() * &a * rih.matrix();
        let u = rh_next.matrix() * &a_tilde * rih.matrix();
        let residual = invariance_residual(p.matrix(), q.gram.matrix(), r.gram.matrix())?;
        let slack = (r.tail_bound + q.tail_bound) / r.gram.min_eigenvalue();
        let b_singular_values = linalg::singular_values(&b)?;
        let u_defect = linalg::orthogonality_defect(&u)?;
        let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
        let mut metric_error: f64 = 0.0;
        for _ in 0..PRESERVATION_PROBES {
            let v = DVector::from_fn(a.nrows(), |_, _| rng.random_range(-1.0..1.0));
            let before = r.quadratic(&v);
            let after = r_next.quadratic(&(&a_tilde * &v));
            metric_error = metric_error.max((after - before).abs() / before);
        }
        let almost_invariance = check_almost_invariance(&r, &q, epsilon)?;
        let proof_chain = proof_chain(&q.gram, &r.gram, epsilon)?;
        Ok(PointReduction {
            point: r.point.clone(),
            a,
            r,
            r_next,
            q,
            p,
            a_tilde,
            b,
            u,
            residual,
            slack,
            b_singular_values,
            u_defect,
            metric_error,
            almost_invariance,
            proof_chain,
        })
    }

    /// `(exp(-eps)(1 - s), exp(eps)(1 + s))`.
    pub fn p_bounds(&self, epsilon: f64) -> (f64, f64) {
        ((-epsilon).exp() * (1.0 - self.slack), epsilon.exp() * (1.0 + self.slack))
    }

    /// `(exp(-eps) - s, exp(eps) + s)`.
    pub fn b_bounds(&self, epsilon: f64) -> (f64, f64) {
        ((-epsilon).exp() - self.slack, epsilon.exp() + self.slack)
    }
}

fn inside(x: f64, (lo, hi): (f64, f64)) -> bool {
    x > lo && x < hi
}

/// Aggregate checks over all sampled points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionDiagnostics {
    pub epsilon: f64,
    pub sample_count: usize,
    pub truncation_range: (usize, usize),
    pub max_slack: f64,
    /// `max |A - A P|`.
    pub perturbation_size: f64,
    /// `(exp(eps) - 1) max |A| + max slack`.
    pub perturbation_bound: f64,
    pub perturbation_within_bound: bool,
    pub max_generator_norm: f64,
    pub p_spectrum_range: (f64, f64),
    pub p_within_bounds: bool,
    pub b_singular_range: (f64, f64),
    pub b_within_bounds: bool,
    pub invariance_residual: f64,
    pub invariance_worst_point: usize,
    pub orthogonality_defect_u: f64,
    pub defect_worst_point: usize,
    pub metric_preservation_error: f64,
    pub almost_invariance_holds: bool,
    pub min_almost_invariance_margin: f64,
    pub proof_chain_holds: bool,
    pub tolerances: ReductionTolerances,
}

impl ReductionDiagnostics {
    /// Verdicts in a fixed order.
    pub fn verdicts(&self) -> Vec<(&'static str, bool)> {
        vec![
            ("almost_invariance", self.almost_invariance_holds),
            ("proof_chain", self.proof_chain_holds),
            ("p_spectrum_within_bounds", self.p_within_bounds),
            ("metric_preservation", self.metric_preservation_error <= self.tolerances.metric_preservation),
            ("perturbation_within_bound", self.perturbation_within_bound),
            ("invariance_residual", self.invariance_residual <= self.tolerances.invariance_residual),
            ("b_singular_values_within_bounds", self.b_within_bounds),
            ("u_orthogonality", self.orthogonality_defect_u <= self.tolerances.orthogonality_defect),
        ]
    }

    pub fn passed(&self) -> bool {
        self.verdicts().iter().all(|v| v.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionResult {
    pub epsilon: f64,
    pub points: Vec<PointReduction>,
    pub diagnostics: ReductionDiagnostics,
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values.enumerate().fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

fn diagnose(epsilon: f64, points: &[PointReduction], tol: ReductionTolerances) -> Result<ReductionDiagnostics> {
    let mut perturbation_size: f64 = 0.0;
    let mut max_generator_norm: f64 = 0.0;
    let mut p_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut b_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut p_ok = true;
    let mut b_ok = true;
    for pt in points {
        perturbation_size = perturbation_size.max(linalg::operator_norm(&(&pt.a - &pt.a_tilde))?);
        max_generator_norm = max_generator_norm.max(linalg::operator_norm(&pt.a)?);
        let (lo, hi) = (pt.p.min_eigenvalue(), pt.p.max_eigenvalue());
        p_range = (p_range.0.min(lo), p_range.1.max(hi));
        p_ok &= inside(lo, pt.p_bounds(epsilon)) && inside(hi, pt.p_bounds(epsilon));
        let (smax, smin) = (pt.b_singular_values[0], *pt.b_singular_values.last().expect("non-empty"));
        b_range = (b_range.0.min(smin), b_range.1.max(smax));
        b_ok &= inside(smin, pt.b_bounds(epsilon)) && inside(smax, pt.b_bounds(epsilon));
    }
    let max_slack = points.iter().map(|p| p.slack).fold(0.0, f64::max);
    let perturbation_bound = (epsilon.exp() - 1.0) * max_generator_norm + max_slack;
    let (invariance_worst_point, invariance_residual) = argmax(points.iter().map(|p| p.residual));
    let (defect_worst_point, orthogonality_defect_u) = argmax(points.iter().map(|p| p.u_defect));
    let truncations = points.iter().flat_map(|p| [p.r.truncation_used, p.r_next.truncation_used]);
    let truncation_range = truncations.fold((usize::MAX, 0), |(lo, hi), n| (lo.min(n), hi.max(n)));
    Ok(ReductionDiagnostics {
        epsilon,
        sample_count: points.len(),
        truncation_range,
        max_slack,
        perturbation_size,
        perturbation_bound,
        perturbation_within_bound: perturbation_size <= perturbation_bound,
        max_generator_norm,
        p_spectrum_range: p_range,
        p_within_bounds: p_ok,
        b_singular_range: b_range,
        b_within_bounds: b_ok,
        invariance_residual,
        invariance_worst_point,
        orthogonality_defect_u,
        defect_worst_point,
        metric_preservation_error: points.iter().map(|p| p.metric_error).fold(0.0, f64::max),
        almost_invariance_holds: points.iter().all(|p| p.almost_invariance.holds),
        min_almost_invariance_margin: points
            .iter()
            .map(|p| p.almost_invariance.lower_margin.min(p.almost_invariance.upper_margin))
            .fold(f64::INFINITY, f64::min),
        proof_chain_holds: points.iter().all(|p| p.proof_chain.holds),
        tolerances: tol,
    })
}

impl<G: Generator> Cocycle<G> {
    /// Reduction at the given points with every check evaluated but none
    /// enforced.
    pub fn reduce_unchecked(
        &self,
        cfg: &NormConfig,
        points: &[BasePoint],
        tol: ReductionTolerances,
    ) -> Result<ReductionResult> {
        if points.is_empty() {
            return Err(Error::InvalidInput("reduction needs at least one point".into()));
        }
        let indexed: Vec<(usize, &BasePoint)> = points.iter().enumerate().collect();
        let reduced = try_par_map(&indexed, |(i, x)| {
            PointReduction::build(self.metric_pair(cfg, x)?, cfg.epsilon, PROBE_SEED + *i as u64)
        })?;
        let diagnostics = diagnose(cfg.epsilon, &reduced, tol)?;
        Ok(ReductionResult { epsilon: cfg.epsilon, points: reduced, diagnostics })
    }

    /// Reduction that fails when the invariance equation is not solved to
    /// tolerance.
    pub fn reduce(&self, cfg: &NormConfig, points: &[BasePoint], tol: ReductionTolerances) -> Result<ReductionResult> {
        let result = self.reduce_unchecked(cfg, points, tol)?;
        let d = &result.diagnostics;
        if d.invariance_residual > tol.invariance_residual {
            return Err(Error::InvarianceResidualExceeded {
                residual: d.invariance_residual,
                tolerance: tol.invariance_residual,
                point: d.invariance_worst_point,
            });
        }
        Ok(result)
    }

    /// Singular values of `R(Fx)^{1/2} A(x) R(x)^{-1/2}` against
    /// `(exp(-eps) - s, exp(eps) + s)`.
    pub fn conjugate_near_isometry(&self, cfg: &NormConfig, points: &[BasePoint]) -> Result<NearIsometry> {
        let per_point = try_par_map(points, |x| {
            let pair = self.metric_pair(cfg, x)?;
            let b = pair.r_next.gram.sqrt().matrix() * &pair.generator_value * pair.r.gram.inv_sqrt().matrix();
            let slack = (pair.r.tail_bound + pair.q.tail_bound) / pair.r.gram.min_eigenvalue();
            Ok((linalg::singular_values(&b)?, slack))
        })?;
        let eps = cfg.epsilon;
        let mut out = NearIsometry {
            min_singular_value: f64::INFINITY,
            max_singular_value: f64::NEG_INFINITY,
            max_slack: 0.0,
            lower_bound: (-eps).exp(),
            upper_bound: eps.exp(),
            holds: true,
            singular_values: Vec::with_capacity(per_point.len()),
        };
        for (sv, s) in per_point {
            let (hi, lo) = (sv[0], *sv.last().expect("non-empty"));
            out.min_singular_value = out.min_singular_value.min(lo);
            out.max_singular_value = out.max_singular_value.max(hi);
            out.max_slack = out.max_slack.max(s);
            out.holds &= inside(lo, ((-eps).exp() - s, eps.exp() + s)) && inside(hi, ((-eps).exp() - s, eps.exp() + s));
            out.singular_values.push(sv);
        }
        Ok(out)
    }

    /// Sweep `epsilon` over a grid and compare consecutive perturbed
    /// cocycles.
    pub fn epsilon_sweep(
        &self,
        cfg: &NormConfig,
        grid: &[f64],
        points: &[BasePoint],
        tol: ReductionTolerances,
    ) -> Result<Vec<SweepRow>> {
        if grid.len() < 2 {
            return Err(Error::InvalidInput("a sweep needs at least two values".into()));
        }
        let mut rows: Vec<SweepRow> = Vec::with_capacity(grid.len());
        let mut previous: Option<(f64, ReductionResult)> = None;
        for &eps in grid {
            let result = self.reduce_unchecked(&cfg.with_epsilon(eps)?, points, tol)?;
            let d = &result.diagnostics;
            let (change, bound_change) = match &previous {
                None => (None, None),
                Some((prev_eps, prev)) => {
                    let mut change: f64 = 0.0;
                    for (a, b) in prev.points.iter().zip(&result.points) {
                        change = change.max(linalg::operator_norm(&(&a.a_tilde - &b.a_tilde))?);
                    }
                    let bound = (prev_eps.exp() - eps.exp()).abs() * d.max_generator_norm;
                    (Some(change), Some(bound))
                }
            };
            rows.push(SweepRow {
                value: eps,
                perturbation_size: d.perturbation_size,
                invariance_residual: d.invariance_residual,
                orthogonality_defect: d.orthogonality_defect_u,
                p_min: d.p_spectrum_range.0,
                p_max: d.p_spectrum_range.1,
                a_tilde_change: change,
                bound_change,
            });
            previous = Some((eps, result));
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NearIsometry {
    pub min_singular_value: f64,
    pub max_singular_value: f64,
    pub max_slack: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub holds: bool,
    #[serde(skip)]
    pub singular_values: Vec<Vec<f64>>,
}

/// One row of a parameter sweep; the change columns compare with the
/// previous row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub perturbation_size: f64,
    pub invariance_residual: f64,
    pub orthogonality_defect: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// `max |A~_prev - A~|` over points.
    pub a_tilde_change: Option<f64>,
    /// `|exp(eps_prev) - exp(eps)| max |A|`.
    pub bound_change: Option<f64>,
}

/// Summary of the isometric conjugate `U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IsometricConjugate {
    pub max_defect: f64,
    pub worst_point: usize,
    /// `max |trace(U^T U) - d|`.
    pub trace_gap: f64,
    /// `max ||det U| - 1|`.
    pub det_gap: f64,
    pub tolerance: f64,
}

/// Checks that every `U(x)` is orthogonal to within the defect tolerance
/// plus the point's truncation slack.
pub fn isometric_conjugate(result: &ReductionResult, tolerance: f64) -> Result<IsometricConjugate> {
    let mut out = IsometricConjugate { max_defect: 0.0, worst_point: 0, trace_gap: 0.0, det_gap: 0.0, tolerance };
    for (i, pt) in result.points.iter().enumerate() {
        let d = pt.u.nrows() as f64;
        out.trace_gap = out.trace_gap.max(((pt.u.transpose() * &pt.u).trace() - d).abs());
        out.det_gap = out.det_gap.max((pt.u.determinant().abs() - 1.0).abs());
        if pt.u_defect > out.max_defect {
            out.max_defect = pt.u_defect;
            out.worst_point = i;
        }
        if pt.u_defect > tolerance + pt.slack {
            return Err(Error::DefectExceeded { defect: pt.u_defect, tolerance: tolerance + pt.slack, point: i });
        }
    }
    Ok(out)
}

/// Eigenvalue moduli of the return map `M_{p-1} ... M_0` along a periodic
/// orbit, each factor divided by `exp(log_rate)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReturnSpectrum {
    pub moduli: Vec<f64>,
    /// `max ||mu| - 1|` over eigenvalues `mu`.
    pub modulus_gap: f64,
    /// `||det| - 1|`.
    pub det_gap: f64,
}

pub fn return_spectrum(factors: &[Matrix], log_rate: f64) -> Result<ReturnSpectrum> {
    let first = factors.first().ok_or_else(|| Error::InvalidInput("return map needs at least one factor".into()))?;
    let scale = (-log_rate).exp();
    let mut m = Matrix::identity(first.nrows(), first.ncols());
    for f in factors {
        m = f * scale * m;
    }
    let mut moduli: Vec<f64> = linalg::eigenvalues(&m)?.iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    let modulus_gap = moduli.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
    let det_gap = (m.determinant().abs() - 1.0).abs();
    Ok(ReturnSpectrum { moduli, modulus_gap, det_gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::{CocycleSpec, TrigPoly};
    use crate::dynamics::BaseDynamics;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn shear() -> Matrix {
        Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])
    }

    fn fixed_cocycle(a: Matrix) -> Cocycle<CocycleSpec> {
        Cocycle::new(CocycleSpec::constant(a).unwrap(), BaseDynamics::fixed_point()).unwrap()
    }

    fn fixed_points() -> Vec<BasePoint> {
        BaseDynamics::fixed_point().sample_points(1, 0)
    }

    fn random_positive(d: usize, rng: &mut ChaCha8Rng) -> PositiveMatrix {
        let m = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let q = m.clone().qr().q();
        let spectrum = DVector::from_fn(d, |_, _| 10f64.powf(rng.random_range(-1.0..1.0)));
        PositiveMatrix::from_matrix(&q * Matrix::from_diagonal(&spectrum) * q.transpose()).unwrap()
    }

    #[test]
    fn equal_forms_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_positive(3, &mut rng);
        let p = solve_positive(&r, &r).unwrap();
        assert_relative_eq!(p.matrix().clone(), Matrix::identity(3, 3), epsilon = 1e-12);
    }

    #[test]
    fn scalar_forms_give_scalar_solution() {
        let q = PositiveMatrix::from_matrix(Matrix::identity(2, 2) * 4.0).unwrap();
        let r = PositiveMatrix::from_matrix(Matrix::identity(2, 2) * 9.0).unwrap();
        let p = solve_positive(&q, &r).unwrap();
        assert_relative_eq!(p.matrix().clone(), Matrix::identity(2, 2) * 1.5, epsilon = 1e-14);
    }

    #[test]
    fn random_pairs_have_small_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let q = random_positive(2, &mut rng);
            let r = random_positive(2, &mut rng);
            let p = solve_positive(&q, &r).unwrap();
            // Oracle: plain multiplication, independent of the solver.
            let lhs = p.matrix() * q.matrix() * p.matrix();
            let rel = (lhs - r.matrix()).norm() / r.matrix().norm();
            assert!(rel <= 1e-10, "{rel}");
        }
    }

    #[test]
    fn return_map_of_reduced_periodic_orbit_is_elliptic() {
        let a0 = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let a1 = Matrix::from_row_slice(2, 2, &[1.0, 0.0, -0.5, 1.0]);
        let c = Cocycle::new(CocycleSpec::per_orbit_point(vec![a0.clone(), a1.clone()]).unwrap(), BaseDynamics::periodic(2).unwrap())
            .unwrap();
        let points = c.base.sample_points(2, 0);
        // Oracle: trace 0 for a1 a0, so the unperturbed return map is elliptic.
        let raw = return_spectrum(&[a0, a1], 0.0).unwrap();
        assert!(raw.modulus_gap < 1e-12);
        let res = c.reduce(&NormConfig::adaptive(0.3).unwrap(), &points, Default::default()).unwrap();
        let factors: Vec<Matrix> = res.points.iter().map(|p| p.a_tilde.clone()).collect();
        let spec = return_spectrum(&factors, 0.0).unwrap();
        assert!(spec.modulus_gap < 1e-8 && spec.det_gap < 1e-8, "{spec:?}");
        let scaled: Vec<Matrix> = factors.iter().map(|m| m * 2.0).collect();
        assert!(return_spectrum(&scaled, 2f64.ln()).unwrap().modulus_gap < 1e-8);
    }

    #[test]
    fn rotation_needs_no_perturbation() {
        let c = Cocycle::new(CocycleSpec::rotation(0.9), BaseDynamics::golden_rotation()).unwrap();
        let points = c.base.sample_points(10, 1);
        let res = c.reduce(&NormConfig::fixed(0.5, 20).unwrap(), &points, Default::default()).unwrap();
        for pt in &res.points {
            assert_relative_eq!(pt.p.matrix().clone(), Matrix::identity(2, 2), epsilon = 1e-12);
        }
        assert!(res.diagnostics.perturbation_size < 1e-12);
        assert!(res.diagnostics.passed(), "{:?}", res.diagnostics);
    }

    #[test]
    fn shear_reduction_meets_proof_bounds() {
        let c = fixed_cocycle(shear());
        for eps in [0.5, 0.2] {
            let res = c.reduce(&NormConfig::adaptive(eps).unwrap(), &fixed_points(), Default::default()).unwrap();
            let d = &res.diagnostics;
            assert!(d.passed(), "{d:?}");
            let pt = &res.points[0];
            let moduli: Vec<f64> = linalg::eigenvalues(&pt.a_tilde).unwrap().iter().map(|z| z.norm()).collect();
            for m in moduli {
                assert!((m - 1.0).abs() < 1e-8, "{m}");
            }
            assert!((pt.a_tilde.determinant().abs() - 1.0).abs() < 1e-8);
            let conj = isometric_conjugate(&res, 1e-8).unwrap();
            assert!(conj.det_gap < 1e-8 && conj.trace_gap < 2e-8);
        }
    }

    #[test]
    fn shear_perturbed_map_is_diagonalizable() {
        let c = fixed_cocycle(shear());
        let res = c.reduce(&NormConfig::adaptive(0.5).unwrap(), &fixed_points(), Default::default()).unwrap();
        let at = &res.points[0].a_tilde;
        // Oracle: a 2x2 real matrix with complex conjugate eigenvalues is
        // diagonalizable over C; check the discriminant is clearly negative.
        let disc = at.trace().powi(2) - 4.0 * at.determinant();
        assert!(disc < -1e-6, "{disc}");
    }

    #[test]
    fn near_isometry_containment() {
        let eps = 0.3;
        for a in [shear(), Matrix::from_row_slice(2, 2, &[1.2, -1.0, 1.0, 0.0])] {
            let c = fixed_cocycle(a);
            let ni = c.conjugate_near_isometry(&NormConfig::adaptive(eps).unwrap(), &fixed_points()).unwrap();
            assert!(ni.holds, "{ni:?}");
            assert!(ni.min_singular_value > 0.740 && ni.max_singular_value < 1.350);
        }
        let rot = Cocycle::new(CocycleSpec::rotation(1.1), BaseDynamics::golden_rotation()).unwrap();
        let ni = rot.conjugate_near_isometry(&NormConfig::fixed(eps, 30).unwrap(), &rot.base.sample_points(5, 0)).unwrap();
        assert_relative_eq!(ni.min_singular_value, 1.0, epsilon = 1e-12);
        assert_relative_eq!(ni.max_singular_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn perturbation_shrinks_with_epsilon() {
        let c = fixed_cocycle(shear());
        let rows = c
            .epsilon_sweep(&NormConfig::adaptive(0.5).unwrap(), &[0.5, 0.2, 0.1], &fixed_points(), Default::default())
            .unwrap();
        for w in rows.windows(2) {
            assert!(w[1].perturbation_size < w[0].perturbation_size);
        }
        assert!(c.epsilon_sweep(&NormConfig::adaptive(0.5).unwrap(), &[0.5], &fixed_points(), Default::default()).is_err());
    }

    #[test]
    fn isometric_conjugates_compose_along_orbits() {
        let inner = CocycleSpec::scalar_times_rotation(TrigPoly::new(0.0, vec![0.2], vec![]), TrigPoly::new(0.4, vec![0.3], vec![]))
            .unwrap();
        let spec = CocycleSpec::conjugated(Matrix::from_row_slice(2, 2, &[1.0, 0.7, 0.0, 1.0]), inner).unwrap();
        let c = Cocycle::new(spec, BaseDynamics::golden_rotation()).unwrap();
        let cfg = NormConfig::fixed(0.9, 40).unwrap();
        let x0 = BasePoint::Torus(vec![0.23]);
        let n = 6;
        let orbit: Vec<BasePoint> = (0..n).map(|k| c.base.iterate(&x0, k).unwrap()).collect();
        let res = c.reduce(&cfg, &orbit, Default::default()).unwrap();
        let mut u_prod = Matrix::identity(2, 2);
        let mut a_prod = Matrix::identity(2, 2);
        for pt in &res.points {
            u_prod = &pt.u * u_prod;
            a_prod = &pt.a_tilde * a_prod;
        }
        let end = res.points.last().unwrap();
        let expected = end.r_next.gram.sqrt().matrix() * a_prod * res.points[0].r.gram.inv_sqrt().matrix();
        assert!((u_prod - expected).norm() < n as f64 * 1e-8);
    }

    #[test]
    fn fixed_truncation_slack_is_recorded() {
        let c = fixed_cocycle(shear());
        let res = c.reduce_unchecked(&NormConfig::fixed(0.5, 10).unwrap(), &fixed_points(), Default::default()).unwrap();
        assert!(res.diagnostics.max_slack > 0.0);
        assert_eq!(res.diagnostics.truncation_range, (10, 10));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn solver_is_a_retraction_onto_the_solution(seed in any::<u64>(), d in 1usize..5, kick in 1e-6f64..1e-3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_positive(d, &mut rng);
            let r = random_positive(d, &mut rng);
            let p = solve_positive(&q, &r).unwrap();
            prop_assert!(invariance_residual(p.matrix(), q.matrix(), r.matrix()).unwrap() <= 1e-10);
            // Perturb P, then read off the form it solves exactly and solve
            // again: the solver must return the perturbed P.
            let e = Matrix::from_fn(d, d, |_, _| rng.random_range(-kick..kick));
            let p2 = PositiveMatrix::from_matrix(p.matrix() + (&e + e.transpose())).unwrap();
            let r2 = PositiveMatrix::from_matrix(p2.matrix() * q.matrix() * p2.matrix()).unwrap();
            let back = solve_positive(&q, &r2).unwrap();
            let err = (back.matrix() - p2.matrix()).norm() / p2.matrix().norm();
            prop_assert!(err <= 1e-10, "err {}", err);
        }

        #[test]
        fn proof_chain_follows_from_almost_invariance(seed in any::<u64>(), eps in 0.05f64..0.8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_positive(3, &mut rng);
            // Q = R^{1/2} S R^{1/2} with spec S inside (e^{-2eps}, e^{2eps}).
            let m = Matrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let o = m.qr().q();
            let spec = DVector::from_fn(3, |_, _| (rng.random_range(-1.8..1.8) * eps).exp());
            let s = &o * Matrix::from_diagonal(&spec) * o.transpose();
            let rh = r.sqrt();
            let q = PositiveMatrix::from_matrix(rh.matrix() * s * rh.matrix()).unwrap();
            let chain = proof_chain(&q, &r, eps).unwrap();
            prop_assert!(chain.holds);
        }
    }
}
