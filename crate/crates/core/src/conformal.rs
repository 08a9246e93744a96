//! Conformal perturbations: divide out a constant or a pointwise growth
//! rate, reduce the rescaled cocycle, and multiply the rate back in.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cocycle::{Cocycle, Generator, Rescaled, Sampling};
use crate::dynamics::BasePoint;
use crate::error::Result;
use crate::linalg::{self, Matrix};
use crate::lyapnorm::NormConfig;
use crate::reduction::{ReductionDiagnostics, ReductionResult, ReductionTolerances};

const CONFORMALITY_PROBES: usize = 8;
const PROBE_SEED: u64 = 0x5eed_0002;

/// `(1/d) log |det A(x)|`.
pub fn det_rescaling<G: Generator + ?Sized>(generator: &G, point: &BasePoint) -> Result<f64> {
    let a = generator.evaluate(point)?;
    Ok(linalg::log_abs_det(&a)?.1 / a.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConformalMode {
    Constant,
    Function,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConformalOptions {
    /// Sampling for the exponent estimates that set or check the rate.
    pub sampling: Sampling,
    /// Allowed `lambda+ - lambda-` when the exponents are estimated.
    pub gap_tolerance: f64,
    /// Allowed `lambda+ - lambda-` when the exponents are exact.
    pub exact_gap_tolerance: f64,
    pub conformality_tolerance: f64,
    pub reduction: ReductionTolerances,
}

impl Default for ConformalOptions {
    fn default() -> Self {
        ConformalOptions {
            sampling: Sampling::new(256, 16, 0),
            gap_tolerance: 1e-3,
            exact_gap_tolerance: 1e-12,
            conformality_tolerance: 1e-8,
            reduction: ReductionTolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformalDiagnostics {
    pub mode: ConformalMode,
    /// The dilation rate in constant mode.
    pub lambda: Option<f64>,
    /// Range of the sampled rate function.
    pub lambda_range: (f64, f64),
    /// `(lambda+, lambda-)` of the original cocycle in constant mode, of the
    /// rescaled one in function mode.
    pub exponents: (f64, f64),
    pub exponents_exact: bool,
    pub conformality_defect: f64,
    pub conformality_tolerance: f64,
    pub warnings: Vec<String>,
    pub reduction: ReductionDiagnostics,
}

impl ConformalDiagnostics {
    pub fn verdicts(&self) -> Vec<(&'static str, bool)> {
        let mut v = vec![("conformality", self.conformality_defect <= self.conformality_tolerance)];
        v.extend(self.reduction.verdicts());
        v
    }

    pub fn passed(&self) -> bool {
        self.verdicts().iter().all(|v| v.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalResult {
    /// Rate at each reduced point.
    pub lambda_values: Vec<f64>,
    /// Reduction of the rescaled cocycle.
    pub inner: ReductionResult,
    /// `exp(lambda(x)) B~(x)` at each point.
    pub a_tilde: Vec<Matrix>,
    pub diagnostics: ConformalDiagnostics,
}

/// `max | |||A~ v|||_{Fx} - e^{lambda} |||v|||_x | / |||v|||_x` over probes.
fn conformality_defect(inner: &ReductionResult, a_tilde: &[Matrix], lambda: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, ((pt, at), l)) in inner.points.iter().zip(a_tilde).zip(lambda).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED + i as u64);
        for _ in 0..CONFORMALITY_PROBES {
            let v = DVector::from_fn(at.nrows(), |_, _| rng.random_range(-1.0..1.0));
            let before = pt.r.quadratic(&v).sqrt();
            let after = pt.r_next.quadratic(&(at * &v)).sqrt();
            worst = worst.max((after - l.exp() * before).abs() / before);
        }
    }
    worst
}

fn assemble(
    mode: ConformalMode,
    lambda: Option<f64>,
    lambda_values: Vec<f64>,
    exponents: (f64, f64, bool),
    warnings: Vec<String>,
    inner: ReductionResult,
    opts: &ConformalOptions,
) -> ConformalResult {
    let a_tilde: Vec<Matrix> = inner.points.iter().zip(&lambda_values).map(|(p, l)| &p.a_tilde * l.exp()).collect();
    let defect = conformality_defect(&inner, &a_tilde, &lambda_values);
    let lambda_range = lambda_values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| (lo.min(l), hi.max(l)));
    let diagnostics = ConformalDiagnostics {
        mode,
        lambda,
        lambda_range,
        exponents: (exponents.0, exponents.1),
        exponents_exact: exponents.2,
        conformality_defect: defect,
        conformality_tolerance: opts.conformality_tolerance,
        warnings,
        reduction: inner.diagnostics.clone(),
    };
    ConformalResult { lambda_values, inner, a_tilde, diagnostics }
}

impl<G: Generator> Cocycle<G> {
    /// Conformal perturbation with a constant rate taken from the exponent
    /// estimator; warns when `lambda+` and `lambda-` differ beyond the gap
    /// tolerance.
    pub fn conformalize_constant(
        &self,
        cfg: &NormConfig,
        points: &[BasePoint],
        opts: &ConformalOptions,
    ) -> Result<ConformalResult> {
        let report = self.estimate_exponents(&opts.sampling)?;
        let exact = report.periodic.is_some();
        let (plus, minus) = (report.lambda_plus_est, report.lambda_minus_est);
        let mut warnings = Vec::new();
        let tol = if exact { opts.exact_gap_tolerance } else { opts.gap_tolerance };
        if plus - minus > tol {
            warnings.push(format!(
                "exponent gap {:.3e} exceeds {tol:.0e}; the cocycle may not be conformal",
                plus - minus
            ));
        }
        let lambda = 0.5 * (plus + minus);
        self.conformalize_with_rate(cfg, points, opts, lambda, (plus, minus, exact), warnings)
    }

    /// Constant-rate conformal perturbation with a caller-supplied rate.
    pub fn conformalize_with_rate(
        &self,
        cfg: &NormConfig,
        points: &[BasePoint],
        opts: &ConformalOptions,
        lambda: f64,
        exponents: (f64, f64, bool),
        warnings: Vec<String>,
    ) -> Result<ConformalResult> {
        let rescaled = self.with_generator(Rescaled { inner: &self.generator, log_factor: move |_: &BasePoint| Ok(-lambda) });
        let inner = rescaled.reduce_unchecked(cfg, points, opts.reduction)?;
        let values = vec![lambda; points.len()];
        Ok(assemble(ConformalMode::Constant, Some(lambda), values, exponents, warnings, inner, opts))
    }

    /// Conformal perturbation with the determinant rate
    /// `lambda(x) = (1/d) log |det A(x)|`.
    pub fn conformalize_function(
        &self,
        cfg: &NormConfig,
        points: &[BasePoint],
        opts: &ConformalOptions,
    ) -> Result<ConformalResult> {
        let rate = |x: &BasePoint| det_rescaling(&self.generator, x);
        let rescaled = self.with_generator(Rescaled { inner: &self.generator, log_factor: |x: &BasePoint| Ok(-rate(x)?) });
        let report = rescaled.estimate_exponents(&opts.sampling)?;
        let exact = report.periodic.is_some();
        let (plus, minus) = (report.lambda_plus_est, report.lambda_minus_est);
        let tol = if exact { opts.exact_gap_tolerance } else { opts.gap_tolerance };
        let mut warnings = Vec::new();
        if plus.abs() > tol || minus.abs() > tol {
            warnings.push(format!(
                "rescaled cocycle has exponents ({plus:.3e}, {minus:.3e}), not within {tol:.0e} of 0"
            ));
        }
        let inner = rescaled.reduce_unchecked(cfg, points, opts.reduction)?;
        let values = points.iter().map(rate).collect::<Result<Vec<f64>>>()?;
        Ok(assemble(ConformalMode::Function, None, values, (plus, minus, exact), warnings, inner, opts))
    }

    pub fn conformalize(
        &self,
        mode: ConformalMode,
        cfg: &NormConfig,
        points: &[BasePoint],
        opts: &ConformalOptions,
    ) -> Result<ConformalResult> {
        match mode {
            ConformalMode::Constant => self.conformalize_constant(cfg, points, opts),
            ConformalMode::Function => self.conformalize_function(cfg, points, opts),
        }
    }
}
