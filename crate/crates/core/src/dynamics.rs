//! Invertible base dynamics: circle/torus translations, periodic orbits and
//! the full shift on finitely many symbols.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use crate::error::{Error, Result};

/// The golden rotation number `(sqrt 5 - 1)/2`.
pub const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// A bi-infinite symbol sequence stored as `left_tail* center right_tail*`,
/// where an absent tail makes the sequence finite on that side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftSequence {
    pub alphabet: u32,
    pub left_tail: Option<Vec<u32>>,
    pub center: Vec<u32>,
    pub right_tail: Option<Vec<u32>>,
}

impl ShiftSequence {
    pub fn new(alphabet: u32, left_tail: Option<Vec<u32>>, center: Vec<u32>, right_tail: Option<Vec<u32>>) -> Result<Self> {
        if alphabet < 2 {
            return Err(Error::InvalidInput("shift alphabet needs at least two symbols".into()));
        }
        if center.is_empty() {
            return Err(Error::InvalidInput("shift center word must be non-empty".into()));
        }
        let words = [left_tail.as_deref(), Some(center.as_slice()), right_tail.as_deref()];
        for w in words.into_iter().flatten() {
            if w.iter().any(|&s| s >= alphabet) {
                return Err(Error::InvalidInput(format!("shift symbol outside alphabet of size {alphabet}")));
            }
        }
        if left_tail.as_ref().is_some_and(|t| t.is_empty()) || right_tail.as_ref().is_some_and(|t| t.is_empty()) {
            return Err(Error::InvalidInput("periodic tails must be non-empty".into()));
        }
        Ok(ShiftSequence { alphabet, left_tail, center, right_tail })
    }

    /// Symbol at index `k`, counted from the start of the center word.
    pub fn symbol(&self, k: i64) -> Result<u32> {
        let len = self.center.len() as i64;
        if (0..len).contains(&k) {
            return Ok(self.center[k as usize]);
        }
        let tail = if k >= len { &self.right_tail } else { &self.left_tail };
        match tail {
            None => Err(Error::WindowExhausted { position: k }),
            Some(word) => {
                let p = word.len() as i64;
                let idx = if k >= len { (k - len).rem_euclid(p) } else { k.rem_euclid(p) };
                Ok(word[idx as usize])
            }
        }
    }
}

/// A point of the full shift: a shared sequence and the index of its zeroth
/// coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftPoint {
    pub sequence: Arc<ShiftSequence>,
    pub position: i64,
}

impl ShiftPoint {
    pub fn current_symbol(&self) -> Result<u32> {
        self.sequence.symbol(self.position)
    }
}

/// A point of the base space.
#[derive(Debug, Clone, PartialEq)]
pub enum BasePoint {
    /// Coordinates in `[0, 1)`.
    Torus(Vec<f64>),
    /// `index` in `0..period`.
    Periodic { index: usize, period: usize },
    Shift(ShiftPoint),
}

impl BasePoint {
    /// Scalar coordinate in `[0, 1)` read by the built-in trigonometric
    /// generators: the first torus coordinate, `index/period`, or the
    /// current symbol divided by the alphabet size.
    pub fn phase(&self) -> Result<f64> {
        match self {
            BasePoint::Torus(x) => Ok(x[0]),
            BasePoint::Periodic { index, period } => Ok(*index as f64 / *period as f64),
            BasePoint::Shift(p) => Ok(p.current_symbol()? as f64 / p.sequence.alphabet as f64),
        }
    }

    /// Discrete label used by per-point generator tables: the orbit index
    /// or the current symbol.
    pub fn label(&self) -> Result<usize> {
        match self {
            BasePoint::Periodic { index, .. } => Ok(*index),
            BasePoint::Shift(p) => Ok(p.current_symbol()? as usize),
            BasePoint::Torus(_) => Err(Error::InvalidInput("torus points carry no discrete label".into())),
        }
    }

    /// Distance on the circle/torus (max over coordinates), or 0/1 equality
    /// for discrete points.
    pub fn distance(&self, other: &BasePoint) -> f64 {
        match (self, other) {
            (BasePoint::Torus(a), BasePoint::Torus(b)) => a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = (x - y).rem_euclid(1.0);
                    d.min(1.0 - d)
                })
                .fold(0.0, f64::max),
            (a, b) => {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

impl Serialize for BasePoint {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(1))?;
        match self {
            BasePoint::Torus(x) => map.serialize_entry("torus", x)?,
            BasePoint::Periodic { index, .. } => map.serialize_entry("periodic", index)?,
            BasePoint::Shift(p) => {
                let window: Vec<Option<u32>> = (-2..=2).map(|k| p.sequence.symbol(p.position + k).ok()).collect();
                map.serialize_entry("shift", &(p.position, window))?
            }
        }
        map.end()
    }
}

/// Which family the base belongs to.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseKind {
    TorusTranslation { shift: Vec<f64> },
    PeriodicOrbit { period: usize },
    FullShift {
        alphabet: u32,
        /// The configured point, sampled first when present.
        point: Option<ShiftPoint>,
        /// Radius of the random center windows drawn by `sample_points`.
        sample_radius: usize,
        /// Period of the random tails attached to sampled windows; `None`
        /// leaves them finite.
        sample_tail_period: Option<usize>,
    },
}

/// An invertible map of the base together with its ergodic-theoretic flags.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDynamics {
    pub kind: BaseKind,
    pub uniquely_ergodic: bool,
    pub minimal: bool,
}

impl BaseDynamics {
    /// Translation by `shift` on the torus. Declaring the shift irrational
    /// (rationally independent) marks the map uniquely ergodic and minimal.
    pub fn torus(shift: Vec<f64>, irrational: bool) -> Result<Self> {
        if shift.is_empty() || shift.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidInput("torus shift must be a non-empty finite vector".into()));
        }
        let shift = shift.into_iter().map(|a| reduce_unit(a)).collect();
        Ok(BaseDynamics {
            kind: BaseKind::TorusTranslation { shift },
            uniquely_ergodic: irrational,
            minimal: irrational,
        })
    }

    /// Circle rotation by the golden number.
    pub fn golden_rotation() -> Self {
        BaseDynamics::torus(vec![GOLDEN], true).expect("valid shift")
    }

    pub fn periodic(period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::InvalidInput("period must be at least 1".into()));
        }
        Ok(BaseDynamics { kind: BaseKind::PeriodicOrbit { period }, uniquely_ergodic: true, minimal: true })
    }

    /// A single fixed point.
    pub fn fixed_point() -> Self {
        BaseDynamics::periodic(1).expect("valid period")
    }

    pub fn full_shift(
        alphabet: u32,
        point: Option<ShiftSequence>,
        origin: i64,
        sample_radius: usize,
        sample_tail_period: Option<usize>,
    ) -> Result<Self> {
        if alphabet < 2 {
            return Err(Error::InvalidInput("shift alphabet needs at least two symbols".into()));
        }
        if sample_tail_period == Some(0) {
            return Err(Error::InvalidInput("sample tail period must be at least 1".into()));
        }
        let point = match point {
            Some(seq) => {
                if seq.alphabet != alphabet {
                    return Err(Error::InvalidInput("point alphabet differs from the shift alphabet".into()));
                }
                let p = ShiftPoint { sequence: Arc::new(seq), position: origin };
                p.current_symbol()?;
                Some(p)
            }
            None => None,
        };
        Ok(BaseDynamics {
            kind: BaseKind::FullShift { alphabet, point, sample_radius, sample_tail_period },
            uniquely_ergodic: false,
            minimal: false,
        })
    }

    /// `F^n(point)`.
    pub fn iterate(&self, point: &BasePoint, n: i64) -> Result<BasePoint> {
        match (&self.kind, point) {
            (BaseKind::TorusTranslation { shift }, BasePoint::Torus(x)) => {
                if x.len() != shift.len() {
                    return Err(Error::DimensionMismatch { expected: shift.len(), found: x.len() });
                }
                let nf = n as f64;
                Ok(BasePoint::Torus(x.iter().zip(shift).map(|(xi, a)| reduce_unit(xi + reduce_unit(nf * a))).collect()))
            }
            (BaseKind::PeriodicOrbit { period }, BasePoint::Periodic { index, period: pp }) => {
                if period != pp || index >= period {
                    return Err(Error::InvalidInput(format!("point {index} is not on an orbit of period {period}")));
                }
                let p = *period as i64;
                Ok(BasePoint::Periodic { index: (*index as i64 + n).rem_euclid(p) as usize, period: *period })
            }
            (BaseKind::FullShift { alphabet, .. }, BasePoint::Shift(sp)) => {
                if sp.sequence.alphabet != *alphabet {
                    return Err(Error::InvalidInput("shift point alphabet mismatch".into()));
                }
                let next = ShiftPoint { sequence: Arc::clone(&sp.sequence), position: sp.position + n };
                next.current_symbol()?;
                Ok(BasePoint::Shift(next))
            }
            _ => Err(Error::InvalidInput("base point does not belong to this base".into())),
        }
    }

    /// One forward step, reducing torus coordinates after the addition.
    pub fn step(&self, point: &BasePoint) -> Result<BasePoint> {
        self.iterate(point, 1)
    }

    pub fn step_back(&self, point: &BasePoint) -> Result<BasePoint> {
        self.iterate(point, -1)
    }

    /// Deterministic finite stand-in for "all points of the base": seeded
    /// uniform points on the torus, the whole orbit for periodic bases, and
    /// seeded random windows for the shift.
    pub fn sample_points(&self, count: usize, seed: u64) -> Vec<BasePoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &self.kind {
            BaseKind::TorusTranslation { shift } => (0..count.max(1))
                .map(|_| BasePoint::Torus(shift.iter().map(|_| rng.random::<f64>()).collect()))
                .collect(),
            BaseKind::PeriodicOrbit { period } => {
                (0..*period).map(|index| BasePoint::Periodic { index, period: *period }).collect()
            }
            BaseKind::FullShift { alphabet, point, sample_radius, sample_tail_period } => {
                let mut out = Vec::with_capacity(count.max(1));
                if let Some(p) = point {
                    out.push(BasePoint::Shift(p.clone()));
                }
                let word = |len: usize, rng: &mut ChaCha8Rng| -> Vec<u32> {
                    (0..len).map(|_| rng.random_range(0..*alphabet)).collect()
                };
                while out.len() < count.max(1) {
                    let center = word(2 * sample_radius + 1, &mut rng);
                    let (left, right) = match sample_tail_period {
                        Some(t) => (Some(word(*t, &mut rng)), Some(word(*t, &mut rng))),
                        None => (None, None),
                    };
                    let sequence = ShiftSequence { alphabet: *alphabet, left_tail: left, center, right_tail: right };
                    out.push(BasePoint::Shift(ShiftPoint {
                        sequence: Arc::new(sequence),
                        position: *sample_radius as i64,
                    }));
                }
                out
            }
        }
    }

    /// `(1/n) sum_{j<n} f(F^j point)`.
    pub fn birkhoff_average(&self, f: impl Fn(&BasePoint) -> f64, point: &BasePoint, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidInput("Birkhoff average needs n >= 1".into()));
        }
        let mut x = point.clone();
        let mut sum = 0.0;
        for j in 0..n {
            sum += f(&x);
            if j + 1 < n {
                x = self.step(&x)?;
            }
        }
        Ok(sum / n as f64)
    }

    /// The period for periodic bases.
    pub fn period(&self) -> Option<usize> {
        match self.kind {
            BaseKind::PeriodicOrbit { period } => Some(period),
            _ => None,
        }
    }

    /// Short human-readable description, recorded in reports.
    pub fn describe(&self) -> String {
        match &self.kind {
            BaseKind::TorusTranslation { shift } => format!("torus translation by {shift:?}"),
            BaseKind::PeriodicOrbit { period } => format!("periodic orbit of period {period}"),
            BaseKind::FullShift { alphabet, .. } => format!("full shift on {alphabet} symbols"),
        }
    }
}

fn reduce_unit(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torus_iterate_example() {
        let dyn_ = BaseDynamics::torus(vec![0.3], true).unwrap();
        let p = dyn_.iterate(&BasePoint::Torus(vec![0.5]), 2).unwrap();
        assert!(p.distance(&BasePoint::Torus(vec![0.1])) < 1e-15);
    }

    #[test]
    fn periodic_iterate_example() {
        let dyn_ = BaseDynamics::periodic(4).unwrap();
        let p = dyn_.iterate(&BasePoint::Periodic { index: 3, period: 4 }, 1).unwrap();
        assert_eq!(p, BasePoint::Periodic { index: 0, period: 4 });
        let q = dyn_.iterate(&p, -5).unwrap();
        assert_eq!(q, BasePoint::Periodic { index: 3, period: 4 });
    }

    #[test]
    fn zero_iterate_is_identity() {
        let torus = BaseDynamics::golden_rotation();
        let x = BasePoint::Torus(vec![0.25]);
        assert_eq!(torus.iterate(&x, 0).unwrap(), x);
        let shift = BaseDynamics::full_shift(2, Some(ShiftSequence::new(2, None, vec![0, 1, 1], None).unwrap()), 1, 3, None).unwrap();
        let p = shift.sample_points(1, 0).remove(0);
        assert_eq!(shift.iterate(&p, 0).unwrap(), p);
    }

    #[test]
    fn finite_shift_window_is_exhausted() {
        let seq = ShiftSequence::new(2, None, vec![0, 1, 1, 0, 1], None).unwrap();
        let shift = BaseDynamics::full_shift(2, Some(seq), 2, 2, None).unwrap();
        let p = shift.sample_points(1, 0).remove(0);
        assert!(shift.iterate(&p, 2).is_ok());
        assert!(shift.iterate(&p, -2).is_ok());
        assert!(matches!(shift.iterate(&p, 3), Err(Error::WindowExhausted { position: 5 })));
        assert!(matches!(shift.iterate(&p, -3), Err(Error::WindowExhausted { .. })));
    }

    #[test]
    fn periodic_tails_make_every_iterate_representable() {
        let seq = ShiftSequence::new(3, Some(vec![2]), vec![0, 1], Some(vec![1, 2])).unwrap();
        assert_eq!(seq.symbol(-7).unwrap(), 2);
        assert_eq!(seq.symbol(2).unwrap(), 1);
        assert_eq!(seq.symbol(3).unwrap(), 2);
        assert_eq!(seq.symbol(4).unwrap(), 1);
        let shift = BaseDynamics::full_shift(3, Some(seq), 0, 1, Some(2)).unwrap();
        let p = shift.sample_points(1, 0).remove(0);
        let far = shift.iterate(&p, 1_000_001).unwrap();
        assert_eq!(shift.iterate(&far, -1_000_001).unwrap(), p);
    }

    #[test]
    fn sample_points_contracts() {
        let periodic = BaseDynamics::periodic(3).unwrap();
        assert_eq!(periodic.sample_points(10, 1).len(), 3);
        let torus = BaseDynamics::golden_rotation();
        let a = torus.sample_points(100, 7);
        assert_eq!(a.len(), 100);
        assert_eq!(a, torus.sample_points(100, 7));
        assert_ne!(a, torus.sample_points(100, 8));
        let shift = BaseDynamics::full_shift(2, None, 0, 4, Some(3)).unwrap();
        let s = shift.sample_points(5, 3);
        assert_eq!(s.len(), 5);
        assert_eq!(s, shift.sample_points(5, 3));
    }

    #[test]
    fn birkhoff_examples() {
        let torus = BaseDynamics::golden_rotation();
        let x = BasePoint::Torus(vec![0.1]);
        assert!((torus.birkhoff_average(|_| 2.5, &x, 17).unwrap() - 2.5).abs() < 1e-15);

        let periodic = BaseDynamics::periodic(2).unwrap();
        let f = |p: &BasePoint| if p.label().unwrap() == 0 { 1.0 } else { 3.0 };
        let avg = periodic.birkhoff_average(f, &BasePoint::Periodic { index: 0, period: 2 }, 2).unwrap();
        assert_eq!(avg, 2.0);

        let cos = |p: &BasePoint| (2.0 * std::f64::consts::PI * p.phase().unwrap()).cos();
        let short = torus.birkhoff_average(cos, &x, 10_000).unwrap();
        let long = torus.birkhoff_average(cos, &x, 200_000).unwrap();
        assert!(short.abs() < 2e-3, "short average {short}");
        assert!(long.abs() < 2e-3, "long average {long}");
    }

    #[test]
    fn flags_follow_the_family() {
        assert!(BaseDynamics::golden_rotation().uniquely_ergodic);
        assert!(!BaseDynamics::torus(vec![0.5], false).unwrap().minimal);
        let shift = BaseDynamics::full_shift(2, None, 0, 1, None).unwrap();
        assert!(!shift.uniquely_ergodic && !shift.minimal);
        assert!(BaseDynamics::periodic(5).unwrap().uniquely_ergodic);
    }
}
