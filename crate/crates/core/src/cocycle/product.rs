use serde::Serialize;

use super::spec::Generator;
use crate::dynamics::{BaseDynamics, BasePoint};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// A matrix product stored as `exp(log_scale) * matrix` with `|matrix| = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledProduct {
    matrix: Matrix,
    log_scale: f64,
}

impl ScaledProduct {
    pub fn identity(dim: usize) -> Self {
        ScaledProduct { matrix: Matrix::identity(dim, dim), log_scale: 0.0 }
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        let mut p = ScaledProduct { matrix: m, log_scale: 0.0 };
        p.normalize()?;
        Ok(p)
    }

    /// Unit-norm factor.
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    /// The represented product; may overflow for long products.
    pub fn to_matrix(&self) -> Matrix {
        &self.matrix * self.log_scale.exp()
    }

    /// `log |product|`.
    pub fn log_norm(&self) -> f64 {
        self.log_scale
    }

    /// `log m(product)`. Loses relative accuracy once the singular value
    /// spread of the product exceeds double precision.
    pub fn log_mininorm(&self) -> Result<f64> {
        Ok(self.log_scale + linalg::mininorm(&self.matrix)?.ln())
    }

    /// Replace the product `P` by `a P`.
    pub fn push_left(&mut self, a: &Matrix) -> Result<()> {
        self.matrix = a * &self.matrix;
        self.normalize()
    }

    /// Replace the product `P` by `P b`.
    pub fn push_right(&mut self, b: &Matrix) -> Result<()> {
        self.matrix = &self.matrix * b;
        self.normalize()
    }

    pub fn inverse(&self) -> Result<ScaledProduct> {
        let mut p = ScaledProduct { matrix: linalg::inverse(&self.matrix)?, log_scale: -self.log_scale };
        p.normalize()?;
        Ok(p)
    }

    fn normalize(&mut self) -> Result<()> {
        let s = linalg::operator_norm(&self.matrix)?;
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidInput(format!("product lost normalizability (norm {s})")));
        }
        self.matrix /= s;
        self.log_scale += s.ln();
        Ok(())
    }
}

/// A generator over an explicit base.
#[derive(Debug, Clone)]
pub struct Cocycle<G> {
    pub generator: G,
    pub base: BaseDynamics,
}

impl<G: Generator> Cocycle<G> {
    /// Couples a generator with a base, checking that the generator accepts
    /// the base's points.
    pub fn new(generator: G, base: BaseDynamics) -> Result<Self> {
        let probe = base.sample_points(1, 0);
        generator.evaluate(&probe[0])?;
        Ok(Cocycle { generator, base })
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    /// Borrowing view, handy for wrapping the generator.
    pub fn by_ref(&self) -> Cocycle<&G> {
        Cocycle { generator: &self.generator, base: self.base.clone() }
    }

    pub fn with_generator<H: Generator>(&self, generator: H) -> Cocycle<H> {
        Cocycle { generator, base: self.base.clone() }
    }

    pub fn evaluate(&self, point: &BasePoint) -> Result<Matrix> {
        let m = self.generator.evaluate(point)?;
        if m.nrows() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: m.nrows() });
        }
        Ok(m)
    }

    pub fn step(&self, point: &BasePoint) -> Result<BasePoint> {
        self.base.step(point)
    }

    /// `A^n(point)` in scaled form, for either sign of `n`.
    pub fn product(&self, point: &BasePoint, n: i64) -> Result<ScaledProduct> {
        let mut acc = ScaledProduct::identity(self.dim());
        self.walk(point, n, |_, a| acc.push_left(a))?;
        Ok(acc)
    }

    /// Visits the one-step factors of `A^n(point)` in application order:
    /// `A(F^j point)` for `n > 0`, `A(F^{-j} point)^{-1}` for `n < 0`. The
    /// callback receives the step count so far (1-based).
    pub fn walk(&self, point: &BasePoint, n: i64, mut f: impl FnMut(usize, &Matrix) -> Result<()>) -> Result<()> {
        let mut x = point.clone();
        if n >= 0 {
            for j in 0..n as usize {
                if j > 0 {
                    x = self.base.step(&x)?;
                }
                f(j + 1, &self.evaluate(&x)?)?;
            }
        } else {
            for j in 0..n.unsigned_abs() as usize {
                x = self.base.step_back(&x)?;
                f(j + 1, &linalg::inverse(&self.evaluate(&x)?)?)?;
            }
        }
        Ok(())
    }

    /// Logarithms of the singular values of `A^n(point)`, `n >= 0`, in
    /// decreasing order.
    ///
    /// Computed from the top singular value of each exterior power, so the
    /// values stay accurate however wide the singular value spread becomes.
    pub fn log_singular_values(&self, point: &BasePoint, n: usize) -> Result<Vec<f64>> {
        Ok(self.log_singular_profile(point, &[n])?.remove(0))
    }

    /// `log_singular_values` at each of the increasing `horizons`, from a
    /// single pass along the orbit.
    pub fn log_singular_profile(&self, point: &BasePoint, horizons: &[usize]) -> Result<Vec<Vec<f64>>> {
        if horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("horizons must be strictly increasing".into()));
        }
        let d = self.dim();
        let mut powers: Vec<ScaledProduct> =
            (1..d).map(|k| ScaledProduct::identity(linalg::subsets(d, k).len())).collect();
        let mut log_det = 0.0;
        let mut out = Vec::with_capacity(horizons.len());
        let read = |powers: &[ScaledProduct], log_det: f64| -> Vec<f64> {
            let mut partial: Vec<f64> = std::iter::once(0.0).chain(powers.iter().map(|p| p.log_scale())).collect();
            partial.push(log_det);
            partial.windows(2).map(|w| w[1] - w[0]).collect()
        };
        let mut next = 0;
        while next < horizons.len() && horizons[next] == 0 {
            out.push(read(&powers, log_det));
            next += 1;
        }
        let last = horizons.last().copied().unwrap_or(0);
        self.walk(point, last as i64, |step, a| {
            for (k, p) in powers.iter_mut().enumerate() {
                if k == 0 {
                    p.push_left(a)?;
                } else {
                    p.push_left(&linalg::compound(a, k + 1))?;
                }
            }
            log_det += linalg::log_abs_det(a)?.1;
            if next < horizons.len() && horizons[next] == step {
                out.push(read(&powers, log_det));
                next += 1;
            }
            Ok(())
        })?;
        Ok(out)
    }
}

/// Upper and lower extremes of products over a finite window of times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProductBounds {
    pub sup_norm: f64,
    pub inf_mininorm: f64,
    pub log_sup_norm: f64,
    pub log_inf_mininorm: f64,
    pub horizon: usize,
    pub sample_count: usize,
}
