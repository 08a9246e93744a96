//! Experiment configuration: TOML in, fully resolved structures out.
//!
//! Every table rejects unknown keys. Omitted optional fields take the
//! defaults below, and the resolved configuration is echoed into each report.

use std::path::Path;

use cocycle_core::cocycle::{CocycleSpec, Sampling, TrigPoly};
use cocycle_core::conformal::ConformalOptions;
use cocycle_core::dynamics::{BaseDynamics, ShiftSequence, GOLDEN};
use cocycle_core::linalg::Matrix;
use cocycle_core::lyapnorm::{NormConfig, Truncation};
use cocycle_core::reduction::ReductionTolerances;
use cocycle_core::splitting::{SplitOptions, DEFAULT_GAP_HORIZONS};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

/// A problem with the configuration file, attributed to a field path.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config error at `{path}`: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl ToString) -> Self {
        ConfigError { path: path.into(), message: message.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub base: BaseConfig,
    pub cocycle: CocycleConfig,
    #[serde(default)]
    pub norm: NormSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn golden_shift() -> Vec<f64> {
    vec![GOLDEN]
}

fn yes() -> bool {
    true
}

fn default_radius() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseConfig {
    /// Translation of the torus; the circle rotation by the golden number
    /// when `shift` is omitted.
    Torus {
        #[serde(default = "golden_shift")]
        shift: Vec<f64>,
        /// Declares the shift rationally independent (uniquely ergodic and
        /// minimal).
        #[serde(default = "yes")]
        irrational: bool,
    },
    /// Cyclic permutation of `period` points; a fixed point when 1.
    Periodic { period: usize },
    /// Full shift on `alphabet` symbols.
    Shift {
        alphabet: u32,
        #[serde(default)]
        point: Option<ShiftPointConfig>,
        #[serde(default = "default_radius")]
        sample_radius: usize,
        #[serde(default)]
        sample_tail_period: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ShiftPointConfig {
    #[serde(default)]
    pub left_tail: Option<Vec<u32>>,
    pub center: Vec<u32>,
    #[serde(default)]
    pub right_tail: Option<Vec<u32>>,
    /// Index of the zeroth coordinate inside `center`.
    #[serde(default)]
    pub origin: i64,
}

/// A number or a finite trigonometric sum in the base phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(untagged)]
pub enum TrigConfig {
    Constant(f64),
    Series(TrigSeries),
}

/// `constant + sum_k cos[k] cos(2 pi (k+1) x) + sin[k] sin(2 pi (k+1) x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrigSeries {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub cos: Vec<f64>,
    #[serde(default)]
    pub sin: Vec<f64>,
}

impl TrigConfig {
    fn to_poly(&self) -> TrigPoly {
        match self {
            TrigConfig::Constant(c) => TrigPoly::constant(*c),
            TrigConfig::Series(s) => TrigPoly::new(s.constant, s.cos.clone(), s.sin.clone()),
        }
    }
}

/// Matrices are written row-major as arrays of rows.
pub type MatrixRows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CocycleConfig {
    Constant { matrix: MatrixRows },
    /// One matrix per orbit point (periodic base) or per symbol (shift).
    PerOrbitPoint { matrices: Vec<MatrixRows> },
    /// `[[E - 2 coupling cos(2 pi x), -1], [1, 0]]`.
    Schrodinger {
        energy: f64,
        #[serde(default)]
        coupling: f64,
    },
    /// `exp(log_scale(x)) rotation(angle(x))`.
    ScalarTimesRotation { log_scale: TrigConfig, angle: TrigConfig },
    Rotation { theta: f64 },
    BlockDiagonal { blocks: Vec<CocycleConfig> },
    /// `exp(log_factor(x)) inner(x)`.
    Scaled { log_factor: TrigConfig, inner: Box<CocycleConfig> },
    /// `M inner(x) M^{-1}`.
    Conjugated { conjugator: MatrixRows, inner: Box<CocycleConfig> },
}

/// `{ fixed = N }` or `{ adaptive = tau }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TruncationConfig {
    Fixed(usize),
    /// Stop once the next term changes the form by at most this relative amount.
    Adaptive(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct NormSection {
    pub epsilon: f64,
    pub truncation: TruncationConfig,
    pub max_terms: usize,
    /// Common fixed truncation for every Gram matrix in a comparison.
    pub strict: bool,
}

impl Default for NormSection {
    fn default() -> Self {
        NormSection {
            epsilon: 0.2,
            truncation: TruncationConfig::Adaptive(NormConfig::DEFAULT_TAU),
            max_terms: NormConfig::DEFAULT_MAX_TERMS,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    /// Base points at which metrics and reductions are evaluated.
    pub count: usize,
    pub seed: u64,
    /// Orbit horizon of the exponent estimator.
    pub horizon: usize,
    pub exponent_samples: usize,
    pub gap_horizons: Vec<usize>,
    pub gap_samples: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            count: 64,
            seed: 0,
            horizon: 256,
            exponent_samples: 16,
            gap_horizons: DEFAULT_GAP_HORIZONS.to_vec(),
            gap_samples: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub invariance_residual: f64,
    pub orthogonality_defect: f64,
    pub metric_preservation: f64,
    pub conformality: f64,
    pub eigenvalue_modulus: f64,
    /// Allowed `lambda+ - lambda-` for estimated exponents.
    pub exponent_gap: f64,
    /// Allowed `lambda+ - lambda-` for exact periodic exponents.
    pub exact_exponent_gap: f64,
    pub bundle_angle: f64,
    pub frame_orthonormality: f64,
    pub slope_threshold: f64,
    pub determinant: f64,
    /// Sweep continuity: changes of the perturbed cocycle may exceed the
    /// change of the proof bound by at most this factor.
    pub continuity_factor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let r = ReductionTolerances::default();
        let c = ConformalOptions::default();
        let s = SplitOptions::default();
        Tolerances {
            invariance_residual: r.invariance_residual,
            orthogonality_defect: r.orthogonality_defect,
            metric_preservation: r.metric_preservation,
            conformality: c.conformality_tolerance,
            eigenvalue_modulus: 1e-8,
            exponent_gap: c.gap_tolerance,
            exact_exponent_gap: c.exact_gap_tolerance,
            bundle_angle: s.angle_tolerance,
            frame_orthonormality: s.frame_tolerance,
            slope_threshold: s.slope_threshold,
            determinant: s.determinant_tolerance,
            continuity_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// Bundle horizon; derived from the gap profile when omitted.
    pub bundle_horizon: Option<usize>,
    pub max_horizon_doublings: usize,
    pub adapted_factors: Vec<f64>,
    /// Cut ranks imposed instead of the detected ones.
    pub cuts: Option<Vec<usize>>,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitOptions::default();
        SplitSection {
            bundle_horizon: None,
            max_horizon_doublings: s.max_horizon_doublings,
            adapted_factors: s.adapted_factors,
            cuts: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub epsilon: Vec<f64>,
    pub horizon: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Not echoed into reports, so that reports do not depend on where they
    /// are written.
    #[serde(skip_serializing)]
    pub dir: String,
    /// Include per-point matrices in reports.
    pub full: bool,
    /// 0 silent, 1 overall verdict, 2 every verdict.
    pub verbosity: u8,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into(), full: false, verbosity: 1 }
    }
}

/// Parses a configuration, naming the offending field on failure.
pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::at("<document>", e.to_string().trim()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "<document>".to_string() } else { path };
        ConfigError::at(path, e.inner().to_string().trim())
    })
}

pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::at(path.display().to_string(), e))?;
    parse(&text)
}

/// JSON schema of the configuration format.
pub fn schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}

fn matrix(rows: &MatrixRows, path: &str) -> Result<Matrix, ConfigError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(ConfigError::at(path, "matrix must be a non-empty square array of rows"));
    }
    Ok(Matrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl BaseConfig {
    pub fn build(&self) -> Result<BaseDynamics, ConfigError> {
        let built = match self {
            BaseConfig::Torus { shift, irrational } => BaseDynamics::torus(shift.clone(), *irrational),
            BaseConfig::Periodic { period } => BaseDynamics::periodic(*period),
            BaseConfig::Shift { alphabet, point, sample_radius, sample_tail_period } => {
                let (seq, origin) = match point {
                    Some(p) => {
                        let seq = ShiftSequence::new(*alphabet, p.left_tail.clone(), p.center.clone(), p.right_tail.clone())
                            .map_err(|e| ConfigError::at("base.point", e))?;
                        (Some(seq), p.origin)
                    }
                    None => (None, 0),
                };
                BaseDynamics::full_shift(*alphabet, seq, origin, *sample_radius, *sample_tail_period)
            }
        };
        built.map_err(|e| ConfigError::at("base", e))
    }
}

impl CocycleConfig {
    pub fn build(&self) -> Result<CocycleSpec, ConfigError> {
        self.build_at("cocycle")
    }

    fn build_at(&self, path: &str) -> Result<CocycleSpec, ConfigError> {
        let wrap = |r: cocycle_core::error::Result<CocycleSpec>| r.map_err(|e| ConfigError::at(path, e));
        match self {
            CocycleConfig::Constant { matrix: m } => wrap(CocycleSpec::constant(matrix(m, &format!("{path}.matrix"))?)),
            CocycleConfig::PerOrbitPoint { matrices } => {
                let ms = matrices
                    .iter()
                    .enumerate()
                    .map(|(i, m)| matrix(m, &format!("{path}.matrices[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?;
                wrap(CocycleSpec::per_orbit_point(ms))
            }
            CocycleConfig::Schrodinger { energy, coupling } => Ok(CocycleSpec::schrodinger(*energy, *coupling)),
            CocycleConfig::ScalarTimesRotation { log_scale, angle } => {
                wrap(CocycleSpec::scalar_times_rotation(log_scale.to_poly(), angle.to_poly()))
            }
            CocycleConfig::Rotation { theta } => Ok(CocycleSpec::rotation(*theta)),
            CocycleConfig::BlockDiagonal { blocks } => {
                let bs = blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.build_at(&format!("{path}.blocks[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?;
                wrap(CocycleSpec::block_diagonal(bs))
            }
            CocycleConfig::Scaled { log_factor, inner } => {
                let inner = inner.build_at(&format!("{path}.inner"))?;
                wrap(CocycleSpec::scaled(log_factor.to_poly(), inner))
            }
            CocycleConfig::Conjugated { conjugator, inner } => {
                let m = matrix(conjugator, &format!("{path}.conjugator"))?;
                let inner = inner.build_at(&format!("{path}.inner"))?;
                wrap(CocycleSpec::conjugated(m, inner))
            }
        }
    }
}

impl ExperimentConfig {
    pub fn norm_config(&self) -> Result<NormConfig, ConfigError> {
        let n = &self.norm;
        let truncation = match n.truncation {
            TruncationConfig::Adaptive(tau) => Truncation::Adaptive { tau },
            TruncationConfig::Fixed(n) => Truncation::Fixed(n),
        };
        let cfg = NormConfig { epsilon: n.epsilon, truncation, max_terms: n.max_terms, strict: n.strict };
        cfg.validate().map_err(|e| ConfigError::at("norm", e))?;
        Ok(cfg)
    }

    pub fn exponent_sampling(&self) -> Sampling {
        Sampling::new(self.sampling.horizon, self.sampling.exponent_samples, self.sampling.seed)
    }

    pub fn reduction_tolerances(&self) -> ReductionTolerances {
        let t = &self.tolerances;
        ReductionTolerances {
            invariance_residual: t.invariance_residual,
            orthogonality_defect: t.orthogonality_defect,
            metric_preservation: t.metric_preservation,
        }
    }

    pub fn conformal_options(&self) -> ConformalOptions {
        let t = &self.tolerances;
        ConformalOptions {
            sampling: self.exponent_sampling(),
            gap_tolerance: t.exponent_gap,
            exact_gap_tolerance: t.exact_exponent_gap,
            conformality_tolerance: t.conformality,
            reduction: self.reduction_tolerances(),
        }
    }

    pub fn split_options(&self) -> SplitOptions {
        let t = &self.tolerances;
        SplitOptions {
            gap_horizons: self.sampling.gap_horizons.clone(),
            gap_samples: self.sampling.gap_samples,
            seed: self.sampling.seed,
            slope_threshold: t.slope_threshold,
            bundle_horizon: self.split.bundle_horizon,
            max_horizon_doublings: self.split.max_horizon_doublings,
            angle_tolerance: t.bundle_angle,
            adapted_factors: self.split.adapted_factors.clone(),
            determinant_tolerance: t.determinant,
            frame_tolerance: t.frame_orthonormality,
            forced_cuts: self.split.cuts.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHEAR: &str = r#"
[base]
kind = "periodic"
period = 1

[cocycle]
kind = "constant"
matrix = [[1, 1], [0, 1]]
"#;

    #[test]
    fn defaults_fill_omitted_sections() {
        let c = parse(SHEAR).unwrap();
        assert_eq!(c.base, BaseConfig::Periodic { period: 1 });
        assert_eq!(c.norm, NormSection::default());
        assert_eq!(c.tolerances.invariance_residual, 1e-10);
        assert_eq!(c.tolerances.orthogonality_defect, 1e-8);
        let spec = c.cocycle.build().unwrap();
        assert!(matches!(spec, CocycleSpec::Constant(ref m) if m[(0, 1)] == 1.0));
    }

    #[test]
    fn missing_kind_names_the_field() {
        let e = parse("[base]\nperiod = 1\n[cocycle]\nkind = \"rotation\"\ntheta = 0.1\n").unwrap_err();
        assert_eq!(e.path, "base");
        assert!(e.to_string().contains("kind"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse(&format!("{SHEAR}\n[norm]\nepsilon = 0.5\nepsilonn = 0.1\n")).unwrap_err();
        assert_eq!(e.path, "norm.epsilonn");
        assert!(e.message.contains("epsilonn"), "{e}");
        let e = parse("[base]\nkind = \"periodic\"\nperiod = 1\nextra = 2\n[cocycle]\nkind = \"rotation\"\ntheta = 0.1\n")
            .unwrap_err();
        assert!(e.message.contains("extra"), "{e}");
    }

    #[test]
    fn nested_blocks_and_trig_series() {
        let text = r#"
[base]
kind = "torus"

[cocycle]
kind = "block_diagonal"
blocks = [
  { kind = "constant", matrix = [[2.0]] },
  { kind = "scalar_times_rotation", log_scale = -0.6931471805599453, angle = { constant = 0.3, cos = [0.7], sin = [0.2] } },
]
"#;
        let c = parse(text).unwrap();
        assert_eq!(c.base, BaseConfig::Torus { shift: vec![GOLDEN], irrational: true });
        let spec = c.cocycle.build().unwrap();
        assert!(matches!(spec, CocycleSpec::BlockDiagonal(ref b) if b.len() == 2));
    }

    #[test]
    fn malformed_matrix_is_attributed() {
        let e = parse("[base]\nkind = \"periodic\"\nperiod = 1\n[cocycle]\nkind = \"constant\"\nmatrix = [[1, 2], [3]]\n")
            .unwrap()
            .cocycle
            .build()
            .unwrap_err();
        assert_eq!(e.path, "cocycle.matrix");
    }

    #[test]
    fn syntax_errors_report_a_line() {
        let e = parse("[base\nkind = 1").unwrap_err();
        assert!(e.message.contains("line 1"), "{e}");
    }
}
