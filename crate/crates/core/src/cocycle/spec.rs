use std::f64::consts::PI;

use crate::dynamics::BasePoint;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Generated matrices must satisfy `|det| >= DET_THRESHOLD`.
pub const DET_THRESHOLD: f64 = 1e-12;

/// A finite trigonometric sum
/// `c + sum_k a_k cos(2 pi k x) + b_k sin(2 pi k x)` in the base phase `x`.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct TrigPoly {
    pub constant: f64,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl TrigPoly {
    pub fn constant(c: f64) -> Self {
        TrigPoly { constant: c, ..Default::default() }
    }

    pub fn new(constant: f64, cos: Vec<f64>, sin: Vec<f64>) -> Self {
        TrigPoly { constant, cos, sin }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut v = self.constant;
        for (k, a) in self.cos.iter().enumerate() {
            v += a * (2.0 * PI * (k + 1) as f64 * x).cos();
        }
        for (k, b) in self.sin.iter().enumerate() {
            v += b * (2.0 * PI * (k + 1) as f64 * x).sin();
        }
        v
    }

    fn is_finite(&self) -> bool {
        self.constant.is_finite() && self.cos.iter().chain(&self.sin).all(|x| x.is_finite())
    }
}

/// Anything that assigns an invertible matrix to each base point.
pub trait Generator: Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, point: &BasePoint) -> Result<Matrix>;
}

impl<T: Generator + ?Sized> Generator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn evaluate(&self, point: &BasePoint) -> Result<Matrix> {
        (**self).evaluate(point)
    }
}

impl<T: Generator + ?Sized> Generator for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn evaluate(&self, point: &BasePoint) -> Result<Matrix> {
        (**self).evaluate(point)
    }
}

/// Built-in generator families.
#[derive(Debug, Clone, PartialEq)]
pub enum CocycleSpec {
    Constant(Matrix),
    /// One matrix per orbit point (periodic bases) or per symbol (shifts).
    PerOrbitPoint(Vec<Matrix>),
    /// `[[E - v, -1], [1, 0]]` with potential `v = 2 coupling cos(2 pi x)`.
    Schrodinger { energy: f64, coupling: f64 },
    /// `exp(log_scale(x)) * rotation(angle(x))`, angle in radians.
    ScalarTimesRotation { log_scale: TrigPoly, angle: TrigPoly },
    BlockDiagonal(Vec<CocycleSpec>),
    /// `exp(log_factor(x)) * inner`.
    Scaled { log_factor: TrigPoly, inner: Box<CocycleSpec> },
    /// `M inner M^{-1}` for a fixed invertible `M`.
    Conjugated { conjugator: Matrix, conjugator_inverse: Matrix, inner: Box<CocycleSpec> },
}

impl CocycleSpec {
    pub fn constant(m: Matrix) -> Result<Self> {
        linalg::check_square(&m)?;
        linalg::check_finite(&m)?;
        Ok(CocycleSpec::Constant(m))
    }

    pub fn per_orbit_point(ms: Vec<Matrix>) -> Result<Self> {
        let first = ms.first().ok_or_else(|| Error::InvalidInput("empty generator table".into()))?;
        let d = first.nrows();
        for m in &ms {
            linalg::check_square(m)?;
            linalg::check_finite(m)?;
            if m.nrows() != d {
                return Err(Error::DimensionMismatch { expected: d, found: m.nrows() });
            }
        }
        Ok(CocycleSpec::PerOrbitPoint(ms))
    }

    pub fn schrodinger(energy: f64, coupling: f64) -> Self {
        CocycleSpec::Schrodinger { energy, coupling }
    }

    pub fn scalar_times_rotation(log_scale: TrigPoly, angle: TrigPoly) -> Result<Self> {
        if !log_scale.is_finite() || !angle.is_finite() {
            return Err(Error::InvalidInput("non-finite trigonometric coefficients".into()));
        }
        Ok(CocycleSpec::ScalarTimesRotation { log_scale, angle })
    }

    /// Constant rotation by `theta`.
    pub fn rotation(theta: f64) -> Self {
        CocycleSpec::ScalarTimesRotation { log_scale: TrigPoly::constant(0.0), angle: TrigPoly::constant(theta) }
    }

    pub fn block_diagonal(blocks: Vec<CocycleSpec>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidInput("block-diagonal generator needs at least one block".into()));
        }
        Ok(CocycleSpec::BlockDiagonal(blocks))
    }

    pub fn scaled(log_factor: TrigPoly, inner: CocycleSpec) -> Result<Self> {
        if !log_factor.is_finite() {
            return Err(Error::InvalidInput("non-finite trigonometric coefficients".into()));
        }
        Ok(CocycleSpec::Scaled { log_factor, inner: Box::new(inner) })
    }

    pub fn conjugated(conjugator: Matrix, inner: CocycleSpec) -> Result<Self> {
        let conjugator_inverse = linalg::inverse(&conjugator)?;
        if conjugator.nrows() != inner.dim() {
            return Err(Error::DimensionMismatch { expected: inner.dim(), found: conjugator.nrows() });
        }
        Ok(CocycleSpec::Conjugated { conjugator, conjugator_inverse, inner: Box::new(inner) })
    }

    fn raw(&self, point: &BasePoint) -> Result<Matrix> {
        match self {
            CocycleSpec::Constant(m) => Ok(m.clone()),
            CocycleSpec::PerOrbitPoint(ms) => {
                if let BasePoint::Periodic { period, .. } = point {
                    if *period != ms.len() {
                        return Err(Error::InvalidInput(format!(
                            "generator table has {} entries but the orbit has period {period}",
                            ms.len()
                        )));
                    }
                }
                let label = point.label()?;
                ms.get(label)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("no generator for label {label}")))
            }
            CocycleSpec::Schrodinger { energy, coupling } => {
                let v = 2.0 * coupling * (2.0 * PI * point.phase()?).cos();
                Ok(Matrix::from_row_slice(2, 2, &[energy - v, -1.0, 1.0, 0.0]))
            }
            CocycleSpec::ScalarTimesRotation { log_scale, angle } => {
                let x = point.phase()?;
                Ok(linalg::rotation(angle.eval(x)) * log_scale.eval(x).exp())
            }
            CocycleSpec::BlockDiagonal(blocks) => {
                let ms = blocks.iter().map(|b| b.raw(point)).collect::<Result<Vec<_>>>()?;
                Ok(linalg::block_diagonal(&ms))
            }
            CocycleSpec::Scaled { log_factor, inner } => Ok(inner.raw(point)? * log_factor.eval(point.phase()?).exp()),
            CocycleSpec::Conjugated { conjugator, conjugator_inverse, inner } => {
                Ok(conjugator * inner.raw(point)? * conjugator_inverse)
            }
        }
    }
}

impl Generator for CocycleSpec {
    fn dim(&self) -> usize {
        match self {
            CocycleSpec::Constant(m) => m.nrows(),
            CocycleSpec::PerOrbitPoint(ms) => ms[0].nrows(),
            CocycleSpec::Schrodinger { .. } | CocycleSpec::ScalarTimesRotation { .. } => 2,
            CocycleSpec::BlockDiagonal(blocks) => blocks.iter().map(|b| b.dim()).sum(),
            CocycleSpec::Scaled { inner, .. } | CocycleSpec::Conjugated { inner, .. } => inner.dim(),
        }
    }

    fn evaluate(&self, point: &BasePoint) -> Result<Matrix> {
        let m = self.raw(point)?;
        checked_invertible(m)
    }
}

pub(crate) fn checked_invertible(m: Matrix) -> Result<Matrix> {
    linalg::check_finite(&m)?;
    let det = m.determinant();
    if det.abs() < DET_THRESHOLD || !det.is_finite() {
        return Err(Error::DegenerateGenerator { det, threshold: DET_THRESHOLD });
    }
    Ok(m)
}

/// `exp(log_factor(point)) * inner(point)` for an arbitrary scalar field.
pub struct Rescaled<G, F> {
    pub inner: G,
    pub log_factor: F,
}

impl<G, F> Generator for Rescaled<G, F>
where
    G: Generator,
    F: Fn(&BasePoint) -> Result<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn evaluate(&self, point: &BasePoint) -> Result<Matrix> {
        let m = self.inner.evaluate(point)?;
        Ok(m * (self.log_factor)(point)?.exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn schrodinger_without_potential() {
        let spec = CocycleSpec::schrodinger(2.0, 0.0);
        for x in [0.0, 0.3, 0.9] {
            let m = spec.evaluate(&BasePoint::Torus(vec![x])).unwrap();
            assert_eq!(m, Matrix::from_row_slice(2, 2, &[2.0, -1.0, 1.0, 0.0]));
        }
    }

    #[test]
    fn schrodinger_potential_uses_phase() {
        let spec = CocycleSpec::schrodinger(0.5, 1.5);
        let m = spec.evaluate(&BasePoint::Torus(vec![0.25])).unwrap();
        assert_relative_eq!(m[(0, 0)], 0.5, epsilon = 1e-15);
        let m = spec.evaluate(&BasePoint::Torus(vec![0.0])).unwrap();
        assert_relative_eq!(m[(0, 0)], 0.5 - 3.0, epsilon = 1e-15);
    }

    #[test]
    fn constant_is_constant() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let spec = CocycleSpec::constant(a.clone()).unwrap();
        assert_eq!(spec.evaluate(&BasePoint::Torus(vec![0.1])).unwrap(), a);
        assert_eq!(spec.evaluate(&BasePoint::Periodic { index: 0, period: 1 }).unwrap(), a);
    }

    #[test]
    fn block_assembly() {
        let theta = TrigPoly::new(0.0, vec![], vec![1.0]);
        let spec = CocycleSpec::block_diagonal(vec![
            CocycleSpec::constant(Matrix::from_element(1, 1, 2.0)).unwrap(),
            CocycleSpec::scalar_times_rotation(TrigPoly::constant(0.5f64.ln()), theta).unwrap(),
        ])
        .unwrap();
        assert_eq!(spec.dim(), 3);
        let x = 0.2;
        let m = spec.evaluate(&BasePoint::Torus(vec![x])).unwrap();
        let r = linalg::rotation((2.0 * PI * x).sin()) * 0.5;
        assert_eq!(m[(0, 0)], 2.0);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(2, 0)], 0.0);
        assert_relative_eq!(m.view((1, 1), (2, 2)).into_owned(), r, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_generator_is_rejected() {
        let spec = CocycleSpec::constant(Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0])).unwrap();
        assert!(matches!(
            spec.evaluate(&BasePoint::Torus(vec![0.0])),
            Err(Error::DegenerateGenerator { .. })
        ));
    }

    #[test]
    fn per_orbit_point_checks_period_and_base() {
        let spec = CocycleSpec::per_orbit_point(vec![Matrix::identity(2, 2), Matrix::identity(2, 2) * 2.0]).unwrap();
        let m = spec.evaluate(&BasePoint::Periodic { index: 1, period: 2 }).unwrap();
        assert_eq!(m[(0, 0)], 2.0);
        assert!(spec.evaluate(&BasePoint::Periodic { index: 1, period: 3 }).is_err());
        assert!(spec.evaluate(&BasePoint::Torus(vec![0.5])).is_err());
    }

    #[test]
    fn conjugation_preserves_spectrum() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 3.0, 0.0, 1.0]);
        let spec = CocycleSpec::conjugated(m, CocycleSpec::constant(Matrix::from_diagonal(&nalgebra::dvector![2.0, 0.5])).unwrap()).unwrap();
        let a = spec.evaluate(&BasePoint::Torus(vec![0.0])).unwrap();
        assert_relative_eq!(a.trace(), 2.5, epsilon = 1e-14);
        assert_relative_eq!(a.determinant(), 1.0, epsilon = 1e-14);
    }
}
