//! Dominated splittings: singular-value gap detection, invariant bundle
//! estimation, restriction to bundles, adapted metrics, and the
//! conformal-subbundle pipelines for uniquely ergodic and minimal bases.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cocycle::{Cocycle, Generator, Rescaled, Sampling};
use crate::conformal::{det_rescaling, ConformalDiagnostics, ConformalOptions, ConformalResult};
use crate::dynamics::BasePoint;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::lyapnorm::{MetricSample, NormConfig};
use crate::par::try_par_map;

pub const DEFAULT_SLOPE_THRESHOLD: f64 = 0.02;
pub const DEFAULT_ANGLE_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_GAP_HORIZONS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
/// Bundle horizon for forced cuts when the profile flags none.
pub const DEFAULT_FORCED_HORIZON: usize = 60;
/// `ln 1e6`: the gap ratio the default bundle horizon aims for.
pub const TARGET_LOG_RATIO: f64 = 13.815_510_557_964_274;

const PROBE_SEED: u64 = 0x5eed_0003;

/// Minimal singular-value gaps over samples, per index and horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapProfile {
    pub horizons: Vec<usize>,
    /// `log_min_ratio[h][i]` is the minimum over samples of
    /// `log(sigma_{i+1} / sigma_{i+2})` of `A^{horizons[h]}`.
    pub log_min_ratio: Vec<Vec<f64>>,
    /// Least-squares growth rate of each column over the top half of the
    /// horizons.
    pub slopes: Vec<f64>,
    pub dominated: Vec<bool>,
    pub threshold: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl GapProfile {
    pub fn dim(&self) -> usize {
        self.slopes.len() + 1
    }

    /// Ranks at which the splitting is cut: `i` for every dominated index `i`.
    pub fn cuts(&self) -> Vec<usize> {
        self.dominated.iter().enumerate().filter(|(_, &d)| d).map(|(i, _)| i + 1).collect()
    }

    pub fn partition(&self) -> Vec<usize> {
        partition_from_cuts(self.dim(), &self.cuts())
    }

    /// Smallest `n` whose fitted gap reaches `TARGET_LOG_RATIO` at every cut.
    pub fn bundle_horizon(&self) -> Option<usize> {
        let c = self.cuts().iter().map(|&r| self.slopes[r - 1]).fold(f64::INFINITY, f64::min);
        c.is_finite().then(|| (TARGET_LOG_RATIO / c).ceil().max(1.0) as usize)
    }

    /// `(horizon, index, min_ratio)` rows with 1-based index.
    pub fn rows(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (h, row) in self.horizons.iter().zip(&self.log_min_ratio) {
            for (i, l) in row.iter().enumerate() {
                out.push((*h, i + 1, l.exp()));
            }
        }
        out
    }
}

/// Bundle dimensions from the cut ranks.
pub fn partition_from_cuts(d: usize, cuts: &[usize]) -> Vec<usize> {
    let mut ranks = vec![0];
    ranks.extend_from_slice(cuts);
    ranks.push(d);
    ranks.windows(2).map(|w| w[1] - w[0]).collect()
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        ys[0] / xs[0]
    } else {
        sxy / sxx
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum PointKey {
    Torus(Vec<u64>),
    Periodic(usize),
    Shift(usize, i64),
}

fn point_key(x: &BasePoint) -> PointKey {
    match x {
        BasePoint::Torus(c) => PointKey::Torus(c.iter().map(|v| v.to_bits()).collect()),
        BasePoint::Periodic { index, .. } => PointKey::Periodic(*index),
        BasePoint::Shift(p) => PointKey::Shift(Arc::as_ptr(&p.sequence) as usize, p.position),
    }
}

/// Orthonormal frames of the bundles of a splitting, computed from long
/// products and memoized per base point.
pub struct BundleEstimator<'a, G> {
    cocycle: &'a Cocycle<G>,
    cuts: Vec<usize>,
    horizon: usize,
    cache: Mutex<HashMap<PointKey, Arc<Vec<Matrix>>>>,
}

impl<'a, G: Generator> BundleEstimator<'a, G> {
    pub fn new(cocycle: &'a Cocycle<G>, cuts: Vec<usize>, horizon: usize) -> Result<Self> {
        let d = cocycle.dim();
        if cuts.windows(2).any(|w| w[0] >= w[1]) || cuts.iter().any(|&r| r == 0 || r >= d) {
            return Err(Error::InvalidInput(format!("cuts {cuts:?} are not increasing ranks in 1..{d}")));
        }
        if !cuts.is_empty() && horizon == 0 {
            return Err(Error::InvalidInput("bundle horizon must be positive".into()));
        }
        Ok(BundleEstimator { cocycle, cuts, horizon, cache: Mutex::new(HashMap::new()) })
    }

    pub fn dims(&self) -> Vec<usize> {
        partition_from_cuts(self.cocycle.dim(), &self.cuts)
    }

    pub fn cuts(&self) -> &[usize] {
        &self.cuts
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Frames `F_1(x), ..., F_k(x)`.
    pub fn frames(&self, x: &BasePoint) -> Result<Arc<Vec<Matrix>>> {
        let key = point_key(x);
        if let Some(f) = self.cache.lock().expect("frame cache").get(&key) {
            return Ok(Arc::clone(f));
        }
        let frames = Arc::new(self.compute_frames(x)?);
        self.cache.lock().expect("frame cache").insert(key, Arc::clone(&frames));
        Ok(frames)
    }

    /// The fast bundle of rank `r` is spanned by the top `r` left singular
    /// vectors of `A^N(F^{-N} x)`, the slow bundle of corank `r` by the
    /// bottom right singular vectors of `A^N(x)`; each bundle is the
    /// intersection of a fast and a slow one.
    fn compute_frames(&self, x: &BasePoint) -> Result<Vec<Matrix>> {
        let d = self.cocycle.dim();
        if self.cuts.is_empty() {
            return Ok(vec![Matrix::identity(d, d)]);
        }
        let n = self.horizon as i64;
        let back = self.cocycle.base.iterate(x, -n)?;
        let (past, _, _) = linalg::svd_sorted(self.cocycle.product(&back, n)?.matrix())?;
        let (_, _, future) = linalg::svd_sorted(self.cocycle.product(x, n)?.matrix())?;
        let mut ranks = vec![0];
        ranks.extend_from_slice(&self.cuts);
        ranks.push(d);
        let mut frames = Vec::with_capacity(ranks.len() - 1);
        for w in ranks.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let fast = past.columns(0, hi).into_owned();
            let basis = if lo == 0 {
                fast
            } else {
                let m = future.columns(0, lo).transpose() * &fast;
                let mut padded = Matrix::zeros(hi, hi);
                padded.rows_mut(0, lo).copy_from(&m);
                let (_, _, v) = linalg::svd_sorted(&padded)?;
                fast * v.columns(lo, hi - lo)
            };
            let mut f = linalg::orthonormalize(&basis);
            linalg::canonicalize_columns(&mut f);
            frames.push(f);
        }
        Ok(frames)
    }

    /// `F_i(Fx)^T A(x) F_i(x)` for every bundle, with the invariance angle
    /// between `A(x) V^i_x` and `V^i_{Fx}`.
    pub fn restricted(&self, x: &BasePoint) -> Result<Vec<(Matrix, f64)>> {
        let a = self.cocycle.evaluate(x)?;
        let here = self.frames(x)?;
        let there = self.frames(&self.cocycle.step(x)?)?;
        here.iter()
            .zip(there.iter())
            .map(|(f, g)| {
                let image = &a * f;
                let angle = linalg::max_principal_angle(&image, g)?;
                Ok((g.transpose() * image, angle))
            })
            .collect()
    }

    /// The restricted cocycle on bundle `i` as a generator.
    pub fn restriction(&self, bundle: usize) -> Restricted<'_, 'a, G> {
        Restricted { estimator: self, bundle }
    }

    /// Frames, restricted matrices and invariance angles at the points;
    /// fails with an increase-horizon advisory when an angle exceeds the
    /// tolerance.
    pub fn estimate(&self, points: &[BasePoint], angle_tolerance: f64) -> Result<BundleEstimate> {
        let per_point = try_par_map(points, |x| {
            let frames = self.frames(x)?.as_ref().clone();
            let next_frames = self.frames(&self.cocycle.step(x)?)?.as_ref().clone();
            let (restricted, defects): (Vec<Matrix>, Vec<f64>) = self.restricted(x)?.into_iter().unzip();
            Ok(PointFrames { point: x.clone(), frames, next_frames, restricted, defects })
        })?;
        let max_defect = per_point.iter().flat_map(|p| p.defects.iter().copied()).fold(0.0, f64::max);
        let mut orthonormality: f64 = 0.0;
        let mut transversality = std::f64::consts::FRAC_PI_2;
        for p in &per_point {
            for (i, f) in p.frames.iter().enumerate() {
                let gram = f.transpose() * f - Matrix::identity(f.ncols(), f.ncols());
                orthonormality = orthonormality.max(linalg::symmetric_norm(&gram)?);
                for g in &p.frames[i + 1..] {
                    let cos = linalg::operator_norm(&(f.transpose() * g))?.min(1.0);
                    transversality = transversality.min(cos.acos());
                }
            }
        }
        if max_defect > angle_tolerance || !max_defect.is_finite() {
            return Err(Error::InsufficientGap { horizon: self.horizon, defect: max_defect, tolerance: angle_tolerance });
        }
        Ok(BundleEstimate {
            dims: self.dims(),
            cuts: self.cuts.clone(),
            horizon: self.horizon,
            max_defect,
            angle_tolerance,
            frame_orthonormality: orthonormality,
            min_transversality: transversality,
            points: per_point,
        })
    }
}

/// A cocycle restricted to one bundle, in the estimated orthonormal frames.
pub struct Restricted<'e, 'a, G> {
    estimator: &'e BundleEstimator<'a, G>,
    bundle: usize,
}

impl<G: Generator> Generator for Restricted<'_, '_, G> {
    fn dim(&self) -> usize {
        self.estimator.dims()[self.bundle]
    }

    fn evaluate(&self, point: &BasePoint) -> Result<Matrix> {
        let a = self.estimator.cocycle.evaluate(point)?;
        let here = self.estimator.frames(point)?;
        let there = self.estimator.frames(&self.estimator.cocycle.step(point)?)?;
        Ok(there[self.bundle].transpose() * a * &here[self.bundle])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointFrames {
    pub point: BasePoint,
    pub frames: Vec<Matrix>,
    pub next_frames: Vec<Matrix>,
    pub restricted: Vec<Matrix>,
    pub defects: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BundleEstimate {
    pub dims: Vec<usize>,
    pub cuts: Vec<usize>,
    pub horizon: usize,
    pub max_defect: f64,
    pub angle_tolerance: f64,
    /// `max |F^T F - I|`.
    pub frame_orthonormality: f64,
    /// Smallest principal angle between two different bundles.
    pub min_transversality: f64,
    #[serde(skip)]
    pub points: Vec<PointFrames>,
}

/// Per-bundle Lyapunov metrics in which domination holds in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedMetric {
    pub epsilons: Vec<f64>,
    /// Constants divided out of each bundle before building its metric.
    pub centers: Vec<f64>,
    /// `min over points and i of m(A_i) / |A_{i+1}|` in the adapted metric.
    pub margin: f64,
    /// The same quantity in the Euclidean frames.
    pub euclidean_margin: f64,
    /// `epsilon` scale factors tried, in order.
    pub grid: Vec<f64>,
    /// `grams[point][bundle] = (G_i(x), G_i(Fx))`.
    pub grams: Vec<Vec<(MetricSample, MetricSample)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptedSummary {
    pub epsilons: Vec<f64>,
    pub centers: Vec<f64>,
    pub margin: f64,
    pub euclidean_margin: f64,
    pub grid: Vec<f64>,
}

impl AdaptedMetric {
    pub fn summary(&self) -> AdaptedSummary {
        AdaptedSummary {
            epsilons: self.epsilons.clone(),
            centers: self.centers.clone(),
            margin: self.margin,
            euclidean_margin: self.euclidean_margin,
            grid: self.grid.clone(),
        }
    }
}

/// One-step domination ratio `min_i m(A_i) / |A_{i+1}|`.
fn domination_ratio(blocks: &[Matrix]) -> Result<f64> {
    let mut ratio = f64::INFINITY;
    for w in blocks.windows(2) {
        ratio = ratio.min(linalg::mininorm(&w[0])? / linalg::operator_norm(&w[1])?);
    }
    Ok(ratio)
}

impl<G: Generator> BundleEstimator<'_, G> {
    /// Builds per-bundle Lyapunov metrics for `exp(-center_i) A_i` with
    /// `epsilon_i = f * c_i / 4`, where `c_i` is the smallest gap rate at a
    /// cut adjacent to bundle `i`, trying the factors `f` in order until the
    /// one-step domination inequality holds at every point.
    pub fn adapted_metric(
        &self,
        cut_rates: &[f64],
        centers: &[f64],
        base_cfg: &NormConfig,
        points: &[BasePoint],
        factors: &[f64],
    ) -> Result<AdaptedMetric> {
        let k = self.dims().len();
        if cut_rates.len() + 1 != k || centers.len() != k {
            return Err(Error::InvalidInput("adapted metric needs one rate per cut and one center per bundle".into()));
        }
        if cut_rates.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::InvalidInput("adapted metric needs positive gap rates".into()));
        }
        let adjacent: Vec<f64> = (0..k)
            .map(|i| {
                let left = if i > 0 { cut_rates[i - 1] } else { f64::INFINITY };
                let right = if i + 1 < k { cut_rates[i] } else { f64::INFINITY };
                left.min(right)
            })
            .collect();
        let euclidean = try_par_map(points, |x| {
            let blocks: Vec<Matrix> = self.restricted(x)?.into_iter().map(|(m, _)| m).collect();
            domination_ratio(&blocks)
        })?;
        let euclidean_margin = euclidean.into_iter().fold(f64::INFINITY, f64::min);
        let mut best = f64::NEG_INFINITY;
        let scale = cut_rates.iter().copied().fold(f64::INFINITY, f64::min) / 4.0;
        for &f in factors {
            let epsilons: Vec<f64> = adjacent.iter().map(|c| f * c / 4.0).collect();
            let attempt = try_par_map(points, |x| {
                let mut grams = Vec::with_capacity(k);
                let mut blocks = Vec::with_capacity(k);
                for i in 0..k {
                    let t = centers[i];
                    let rescaled = self.cocycle.with_generator(Rescaled {
                        inner: self.restriction(i),
                        log_factor: move |_: &BasePoint| Ok(-t),
                    });
                    let pair = rescaled.metric_pair(&base_cfg.with_epsilon(epsilons[i])?, x)?;
                    let adapted = pair.r_next.gram.sqrt().matrix() * &pair.generator_value * pair.r.gram.inv_sqrt().matrix();
                    blocks.push(adapted * t.exp());
                    grams.push((pair.r, pair.r_next));
                }
                Ok((domination_ratio(&blocks)?, grams))
            });
            let per_point = match attempt {
                Ok(v) => v,
                Err(Error::SeriesDivergence { .. }) => continue,
                Err(e) => return Err(e),
            };
            let margin = per_point.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            best = best.max(margin);
            if margin > 1.0 {
                return Ok(AdaptedMetric {
                    epsilons,
                    centers: centers.to_vec(),
                    margin,
                    euclidean_margin,
                    grid: factors.iter().map(|f| f * scale).collect(),
                    grams: per_point.into_iter().map(|p| p.1).collect(),
                });
            }
        }
        Err(Error::AdaptedMetricFailure { margin: best, grid: factors.iter().map(|f| f * scale).collect() })
    }
}

impl<G: Generator> Cocycle<G> {
    /// Singular-value gap profile over sampled points. Slopes are fitted on
    /// the largest half of `horizons`; an index is dominated when its slope
    /// exceeds `threshold`.
    pub fn gap_profile(&self, horizons: &[usize], samples: usize, seed: u64, threshold: f64) -> Result<GapProfile> {
        if horizons.len() < 2 || horizons.windows(2).any(|w| w[0] >= w[1]) || horizons[0] == 0 {
            return Err(Error::InvalidInput("gap profile needs at least two increasing positive horizons".into()));
        }
        let d = self.dim();
        let points = self.base.sample_points(samples, seed);
        let per_point = try_par_map(&points, |x| self.log_singular_profile(x, horizons))?;
        let log_min_ratio: Vec<Vec<f64>> = (0..horizons.len())
            .map(|h| {
                (0..d - 1)
                    .map(|i| per_point.iter().map(|p| p[h][i] - p[h][i + 1]).fold(f64::INFINITY, f64::min))
                    .collect()
            })
            .collect();
        let top = horizons.len() / 2;
        let xs: Vec<f64> = horizons[top..].iter().map(|&h| h as f64).collect();
        let slopes: Vec<f64> = (0..d - 1)
            .map(|i| {
                let ys: Vec<f64> = log_min_ratio[top..].iter().map(|r| r[i]).collect();
                least_squares_slope(&xs, &ys)
            })
            .collect();
        let dominated = slopes.iter().map(|&s| s > threshold).collect();
        Ok(GapProfile {
            horizons: horizons.to_vec(),
            log_min_ratio,
            slopes,
            dominated,
            threshold,
            sample_count: points.len(),
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    UniquelyErgodic,
    Minimal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitOptions {
    pub gap_horizons: Vec<usize>,
    pub gap_samples: usize,
    pub seed: u64,
    pub slope_threshold: f64,
    /// Bundle horizon; derived from the gap profile when absent.
    pub bundle_horizon: Option<usize>,
    /// Times the horizon may be doubled when invariance angles are too big.
    pub max_horizon_doublings: usize,
    pub angle_tolerance: f64,
    pub adapted_factors: Vec<f64>,
    pub determinant_tolerance: f64,
    /// Allowed `|F^T F - I|` for the bundle frames.
    pub frame_tolerance: f64,
    /// Cut ranks to use instead of the detected ones.
    pub forced_cuts: Option<Vec<usize>>,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            gap_horizons: DEFAULT_GAP_HORIZONS.to_vec(),
            gap_samples: 32,
            seed: 0,
            slope_threshold: DEFAULT_SLOPE_THRESHOLD,
            bundle_horizon: None,
            max_horizon_doublings: 4,
            angle_tolerance: DEFAULT_ANGLE_TOLERANCE,
            adapted_factors: vec![0.9, 0.6, 0.3],
            determinant_tolerance: 1e-8,
            frame_tolerance: 1e-10,
            forced_cuts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BundleSummary {
    pub dim: usize,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub exponents_exact: bool,
    /// The constant rate in uniquely ergodic mode.
    pub lambda: Option<f64>,
    /// Range of `(1/d_i) log |det A_i|` over points.
    pub lambda_reference_range: (f64, f64),
    pub conformal: ConformalDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineChecks {
    pub finest: bool,
    pub invariance_max_angle: f64,
    pub angle_tolerance: f64,
    pub frame_orthonormality: f64,
    pub frame_tolerance: f64,
    pub min_transversality: f64,
    pub ordering_holds: bool,
    /// Smallest `lambda_i - lambda_{i+1}` over points.
    pub ordering_margin: f64,
    /// `max |sum d_i lambda_i - log|det A| - log|det W(x)| + log|det W(Fx)||`.
    pub determinant_gap: f64,
    /// `max |log|det W(x)| - log|det W(Fx)||`; zero for orthogonal bundles.
    pub volume_correction: f64,
    pub determinant_tolerance: f64,
    pub adapted_margin: Option<f64>,
    pub euclidean_margin: Option<f64>,
    pub max_bundle_conformality_defect: f64,
    pub assembled_conformality_defect: f64,
    pub conformality_tolerance: f64,
    /// `max |F_i^T G F_j| / |G|` over `i != j`.
    pub bundle_orthogonality: f64,
    pub perturbation_size: f64,
}

impl PipelineChecks {
    pub fn verdicts(&self) -> Vec<(&'static str, bool)> {
        vec![
            ("finest_splitting", self.finest),
            ("bundle_invariance", self.invariance_max_angle <= self.angle_tolerance),
            ("frames_orthonormal", self.frame_orthonormality <= self.frame_tolerance),
            ("exponent_ordering", self.ordering_holds),
            ("determinant_consistency", self.determinant_gap <= self.determinant_tolerance),
            ("adapted_domination", self.adapted_margin.map_or(true, |m| m > 1.0)),
            ("bundle_conformality", self.max_bundle_conformality_defect <= self.conformality_tolerance),
            ("assembled_conformality", self.assembled_conformality_defect <= self.conformality_tolerance),
        ]
    }
}

/// Per-point output of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelinePoint {
    pub point: BasePoint,
    pub frames: Vec<Matrix>,
    pub restricted: Vec<Matrix>,
    /// `(1/d_i) log |det A_i(x)|` in orthonormal frames.
    pub lambda_reference: Vec<f64>,
    /// The same rates measured in the adapted metric.
    pub lambda_adapted: Option<Vec<f64>>,
    /// Rates used for conformality of the assembled map.
    pub lambda_effective: Vec<f64>,
    /// Assembled Gram matrix, making the bundles orthogonal.
    pub metric: Matrix,
    pub a_tilde: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplittingReport {
    pub mode: PipelineMode,
    pub profile: GapProfile,
    pub partition: Vec<usize>,
    pub bundles_estimate: BundleEstimate,
    pub bundles: Vec<BundleSummary>,
    pub adapted: Option<AdaptedSummary>,
    pub checks: PipelineChecks,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub points: Vec<PipelinePoint>,
}

impl SplittingReport {
    pub fn verdicts(&self) -> Vec<(String, bool)> {
        let mut out: Vec<(String, bool)> = self.checks.verdicts().into_iter().map(|(n, v)| (n.to_string(), v)).collect();
        for (i, b) in self.bundles.iter().enumerate() {
            for (n, v) in b.conformal.reduction.verdicts() {
                out.push((format!("bundle_{}_{n}", i + 1), v));
            }
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.verdicts().iter().all(|v| v.1)
    }
}

/// Gap profile, bundles and (for `k >= 2`) the adapted metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitOutcome {
    pub profile: GapProfile,
    pub partition: Vec<usize>,
    pub bundles: BundleEstimate,
    pub bundle_exponents: Vec<(f64, f64)>,
    pub adapted: Option<AdaptedSummary>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

impl<G: Generator> Cocycle<G> {
    fn detect<'a>(&'a self, points: &[BasePoint], opts: &SplitOptions) -> Result<(GapProfile, BundleEstimator<'a, G>, BundleEstimate)> {
        let profile = stage(
            "gap_profile",
            self.gap_profile(&opts.gap_horizons, opts.gap_samples, opts.seed, opts.slope_threshold),
        )?;
        let cuts = opts.forced_cuts.clone().unwrap_or_else(|| profile.cuts());
        let mut horizon = opts
            .bundle_horizon
            .or_else(|| profile.bundle_horizon())
            .unwrap_or(if cuts.is_empty() { 0 } else { DEFAULT_FORCED_HORIZON });
        let mut doublings = 0;
        loop {
            let estimator = stage("bundles", BundleEstimator::new(self, cuts.clone(), horizon))?;
            match estimator.estimate(points, opts.angle_tolerance) {
                Ok(est) => return Ok((profile, estimator, est)),
                Err(Error::InsufficientGap { .. }) if doublings < opts.max_horizon_doublings => {
                    horizon *= 2;
                    doublings += 1;
                }
                Err(e) => return Err(e.in_stage("bundles")),
            }
        }
    }

    fn bundle_exponents(estimator: &BundleEstimator<'_, G>, sampling: &Sampling) -> Result<Vec<(f64, f64, bool)>> {
        (0..estimator.dims().len())
            .map(|i| {
                let r = estimator.cocycle.with_generator(estimator.restriction(i)).estimate_exponents(sampling)?;
                Ok((r.lambda_plus_est, r.lambda_minus_est, r.periodic.is_some()))
            })
            .collect()
    }

    /// Detects the finest dominated splitting, estimates its bundles and
    /// builds an adapted metric.
    pub fn split(&self, cfg: &NormConfig, points: &[BasePoint], opts: &SplitOptions, sampling: &Sampling) -> Result<SplitOutcome> {
        let (profile, estimator, estimate) = self.detect(points, opts)?;
        let exps = stage("exponents", Self::bundle_exponents(&estimator, sampling))?;
        let adapted = if exps.len() > 1 {
            let rates: Vec<f64> = profile.cuts().iter().map(|&r| profile.slopes[r - 1]).collect();
            let centers: Vec<f64> = exps.iter().map(|e| 0.5 * (e.0 + e.1)).collect();
            let m = stage("adapted_metric", estimator.adapted_metric(&rates, &centers, cfg, points, &opts.adapted_factors))?;
            Some(m.summary())
        } else {
            None
        };
        Ok(SplitOutcome {
            partition: profile.partition(),
            profile,
            bundles: estimate,
            bundle_exponents: exps.iter().map(|e| (e.0, e.1)).collect(),
            adapted,
        })
    }

    /// Splits the cocycle into its finest dominated bundles, makes each
    /// bundle conformal (constant rates on uniquely ergodic bases, the
    /// determinant rates on minimal ones) and assembles a metric in which
    /// the bundles are orthogonal.
    pub fn conformal_splitting_pipeline(
        &self,
        cfg: &NormConfig,
        points: &[BasePoint],
        mode: PipelineMode,
        opts: &SplitOptions,
        conformal: &ConformalOptions,
    ) -> Result<SplittingReport> {
        match mode {
            PipelineMode::UniquelyErgodic if !self.base.uniquely_ergodic => {
                return Err(Error::InvalidInput("uniquely ergodic mode needs a uniquely ergodic base".into()))
            }
            PipelineMode::Minimal if !self.base.minimal => {
                return Err(Error::InvalidInput("minimal mode needs a minimal base".into()))
            }
            _ => {}
        }
        let (profile, estimator, estimate) = self.detect(points, opts)?;
        let dims = estimator.dims();
        let k = dims.len();
        let exps = stage("exponents", Self::bundle_exponents(&estimator, &conformal.sampling))?;
        let mut warnings = Vec::new();

        let adapted = if k > 1 {
            let rates: Vec<f64> = profile.cuts().iter().map(|&r| profile.slopes[r - 1]).collect();
            let centers: Vec<f64> = exps.iter().map(|e| 0.5 * (e.0 + e.1)).collect();
            Some(stage("adapted_metric", estimator.adapted_metric(&rates, &centers, cfg, points, &opts.adapted_factors))?)
        } else {
            None
        };

        let mut results: Vec<ConformalResult> = Vec::with_capacity(k);
        for (i, &(plus, minus, exact)) in exps.iter().enumerate() {
            let restricted = self.with_generator(estimator.restriction(i));
            let r = match mode {
                PipelineMode::UniquelyErgodic => {
                    let tol = if exact { conformal.exact_gap_tolerance } else { conformal.gap_tolerance };
                    let mut w = Vec::new();
                    if plus - minus > tol {
                        w.push(format!("bundle {}: exponent gap {:.3e} exceeds {tol:.0e}", i + 1, plus - minus));
                    }
                    restricted.conformalize_with_rate(cfg, points, conformal, 0.5 * (plus + minus), (plus, minus, exact), w)
                }
                PipelineMode::Minimal => restricted.conformalize_function(cfg, points, conformal),
            };
            let r = stage("conformalize", r)?;
            warnings.extend(r.diagnostics.warnings.iter().map(|w| format!("bundle {}: {w}", i + 1)));
            results.push(r);
        }

        // Reference rates, adapted rates and the assembled map.
        let mut out_points = Vec::with_capacity(points.len());
        let mut determinant_gap: f64 = 0.0;
        let mut volume_correction: f64 = 0.0;
        let mut ordering_margin = f64::INFINITY;
        let mut assembled_defect: f64 = 0.0;
        let mut bundle_orthogonality: f64 = 0.0;
        let mut perturbation_size: f64 = 0.0;
        for (j, pf) in estimate.points.iter().enumerate() {
            let x = &pf.point;
            let lambda_reference = pf
                .restricted
                .iter()
                .map(|m| Ok(linalg::log_abs_det(m)?.1 / m.nrows() as f64))
                .collect::<Result<Vec<f64>>>()?;
            let lambda_adapted = match &adapted {
                Some(a) => Some(
                    (0..k)
                        .map(|i| {
                            let (g, g_next) = &a.grams[j][i];
                            lambda_reference[i] + (g_next.gram.log_det() - g.gram.log_det()) / (2.0 * dims[i] as f64)
                        })
                        .collect::<Vec<f64>>(),
                ),
                None => None,
            };
            let lambda_effective: Vec<f64> = match mode {
                PipelineMode::UniquelyErgodic => results.iter().map(|r| r.lambda_values[j]).collect(),
                PipelineMode::Minimal => lambda_adapted.clone().unwrap_or_else(|| lambda_reference.clone()),
            };
            for w in lambda_effective.windows(2) {
                ordering_margin = ordering_margin.min(w[0] - w[1]);
            }

            let w_here = Matrix::from_columns(&pf.frames.iter().flat_map(|f| f.column_iter().map(|c| c.into_owned())).collect::<Vec<_>>());
            let w_next =
                Matrix::from_columns(&pf.next_frames.iter().flat_map(|f| f.column_iter().map(|c| c.into_owned())).collect::<Vec<_>>());
            let a = self.evaluate(x)?;
            let (_, ld_a) = linalg::log_abs_det(&a)?;
            let (_, ld_here) = linalg::log_abs_det(&w_here)?;
            let (_, ld_next) = linalg::log_abs_det(&w_next)?;
            let sum: f64 = dims.iter().zip(&lambda_reference).map(|(&di, l)| di as f64 * l).sum();
            determinant_gap = determinant_gap.max((sum - ld_a - ld_here + ld_next).abs());
            volume_correction = volume_correction.max((ld_here - ld_next).abs());

            // Per-bundle metrics, rescaled in minimal mode so that each
            // bundle dilates by its adapted rate.
            let mut m_here = Vec::with_capacity(k);
            let mut m_next = Vec::with_capacity(k);
            let mut blocks = Vec::with_capacity(k);
            for i in 0..k {
                let pt = &results[i].inner.points[j];
                let (s_here, s_next) = match (mode, &adapted) {
                    (PipelineMode::Minimal, Some(a)) => {
                        let (g, g_next) = &a.grams[j][i];
                        ((g.gram.log_det() / dims[i] as f64).exp(), (g_next.gram.log_det() / dims[i] as f64).exp())
                    }
                    _ => (1.0, 1.0),
                };
                m_here.push(pt.r.gram.matrix() * s_here);
                m_next.push(pt.r_next.gram.matrix() * s_next);
                blocks.push(results[i].a_tilde[j].clone());
            }
            let w_here_inv = linalg::inverse(&w_here)?;
            let w_next_inv = linalg::inverse(&w_next)?;
            let metric = w_here_inv.transpose() * linalg::block_diagonal(&m_here) * &w_here_inv;
            let metric_next = w_next_inv.transpose() * linalg::block_diagonal(&m_next) * &w_next_inv;
            let a_tilde = &w_next * linalg::block_diagonal(&blocks) * &w_here_inv;
            perturbation_size = perturbation_size.max(linalg::operator_norm(&(&a - &a_tilde))?);

            let g_norm = linalg::operator_norm(&metric)?;
            for (i, fi) in pf.frames.iter().enumerate() {
                for fj in &pf.frames[i + 1..] {
                    bundle_orthogonality = bundle_orthogonality.max(linalg::operator_norm(&(fi.transpose() * &metric * fj))? / g_norm);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED + j as u64);
            for (i, fi) in pf.frames.iter().enumerate() {
                for _ in 0..4 {
                    let y = DVector::from_fn(fi.ncols(), |_, _| rng.random_range(-1.0..1.0));
                    let v = fi * y;
                    let before = v.dot(&(&metric * &v)).sqrt();
                    let av = &a_tilde * &v;
                    let after = av.dot(&(&metric_next * &av)).sqrt();
                    assembled_defect = assembled_defect.max((after - lambda_effective[i].exp() * before).abs() / before);
                }
            }
            out_points.push(PipelinePoint {
                point: x.clone(),
                frames: pf.frames.clone(),
                restricted: pf.restricted.clone(),
                lambda_reference,
                lambda_adapted,
                lambda_effective,
                metric,
                a_tilde,
            });
        }
        if k == 1 {
            ordering_margin = f64::INFINITY;
        }

        let bundles: Vec<BundleSummary> = results
            .iter()
            .zip(&exps)
            .enumerate()
            .map(|(i, (r, e))| {
                let range = out_points
                    .iter()
                    .map(|p| p.lambda_reference[i])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), l| (lo.min(l), hi.max(l)));
                BundleSummary {
                    dim: dims[i],
                    lambda_plus: e.0,
                    lambda_minus: e.1,
                    exponents_exact: e.2,
                    lambda: r.diagnostics.lambda,
                    lambda_reference_range: range,
                    conformal: r.diagnostics.clone(),
                }
            })
            .collect();
        let flagged = profile.cuts();
        let checks = PipelineChecks {
            finest: flagged == estimator.cuts(),
            invariance_max_angle: estimate.max_defect,
            angle_tolerance: estimate.angle_tolerance,
            frame_orthonormality: estimate.frame_orthonormality,
            frame_tolerance: opts.frame_tolerance,
            min_transversality: estimate.min_transversality,
            ordering_holds: ordering_margin > 0.0,
            ordering_margin,
            determinant_gap,
            volume_correction,
            determinant_tolerance: opts.determinant_tolerance,
            adapted_margin: adapted.as_ref().map(|a| a.margin),
            euclidean_margin: adapted.as_ref().map(|a| a.euclidean_margin),
            max_bundle_conformality_defect: bundles.iter().map(|b| b.conformal.conformality_defect).fold(0.0, f64::max),
            assembled_conformality_defect: assembled_defect,
            conformality_tolerance: conformal.conformality_tolerance,
            bundle_orthogonality,
            perturbation_size,
        };
        Ok(SplittingReport {
            mode,
            partition: dims,
            profile,
            bundles_estimate: estimate,
            bundles,
            adapted: adapted.map(|a| a.summary()),
            checks,
            warnings,
            points: out_points,
        })
    }
}

/// Convenience accessor for reports: `(1/d_i) log |det A_i(x)|` through the
/// generator interface.
pub fn bundle_rate<G: Generator>(restricted: &G, x: &BasePoint) -> Result<f64> {
    det_rescaling(restricted, x)
}
