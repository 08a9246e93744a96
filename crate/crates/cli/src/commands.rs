//! Subcommand implementations on top of the core pipelines.

use std::time::Instant;

use cocycle_core::cocycle::{Cocycle, CocycleSpec};
use cocycle_core::conformal::ConformalMode;
use cocycle_core::dynamics::{BaseDynamics, BasePoint};
use cocycle_core::error::Error;
use cocycle_core::lyapnorm::NormConfig;
use cocycle_core::reduction::{isometric_conjugate, return_spectrum, ReductionResult};
use cocycle_core::splitting::{GapProfile, PipelineMode};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, ExperimentConfig};
use crate::report::{rows, BaseSummary, RunReport, StageFailure, StageResult, StageTiming, Timings, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Epsilon,
    Horizon,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Exponents,
    Reduce,
    Conformalize(ConformalMode),
    Split,
    Pipeline(PipelineMode),
    Sweep { param: SweepParam, values: Option<Vec<f64>> },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Exponents => "exponents",
            Command::Reduce => "reduce",
            Command::Conformalize(_) => "conformalize",
            Command::Split => "split",
            Command::Pipeline(_) => "pipeline",
            Command::Sweep { param: SweepParam::Epsilon, .. } => "sweep_epsilon",
            Command::Sweep { param: SweepParam::Horizon, .. } => "sweep_horizon",
        }
    }

    fn mode(&self) -> Option<String> {
        match self {
            Command::Conformalize(ConformalMode::Constant) => Some("constant".into()),
            Command::Conformalize(ConformalMode::Function) => Some("function".into()),
            Command::Pipeline(PipelineMode::UniquelyErgodic) => Some("uniquely_ergodic".into()),
            Command::Pipeline(PipelineMode::Minimal) => Some("minimal".into()),
            _ => None,
        }
    }
}

/// A finished run: the report, side tables and the process exit code.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub timings: Timings,
    /// `(file name, CSV bytes)`.
    pub tables: Vec<(String, Vec<u8>)>,
}

impl RunOutcome {
    /// 0 when every verdict passed, 1 on a failed verdict, 3 on a stage error.
    pub fn exit_code(&self) -> i32 {
        if self.report.error.is_some() {
            3
        } else if self.report.passed {
            0
        } else {
            1
        }
    }
}

struct Runner {
    config: ExperimentConfig,
    base: BaseDynamics,
    cocycle: Cocycle<CocycleSpec>,
    norm: NormConfig,
    points: Vec<BasePoint>,
    report: RunReport,
    timings: Vec<StageTiming>,
    tables: Vec<(String, Vec<u8>)>,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

fn stage_name(e: &Error, fallback: &str) -> String {
    match e {
        Error::Stage { stage, .. } => stage.to_string(),
        _ => fallback.to_string(),
    }
}

impl Runner {
    /// Runs a stage, recording its timing and, on failure, the error.
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&Self) -> cocycle_core::error::Result<T>) -> Option<T> {
        let start = Instant::now();
        let out = f(self);
        self.timings.push(StageTiming { stage: name.to_string(), seconds: start.elapsed().as_secs_f64() });
        match out {
            Ok(v) => Some(v),
            Err(e) => {
                self.report.error = Some(StageFailure { stage: stage_name(&e, name), message: e.to_string() });
                None
            }
        }
    }

    fn record(&mut self, name: &str, value: Value) {
        self.report.stages.push(StageResult { stage: name.to_string(), result: value });
    }

    fn verdict(&mut self, name: impl Into<String>, passed: bool) {
        self.report.verdicts.push(Verdict { name: name.into(), passed });
    }

    fn full(&self) -> bool {
        self.config.output.full
    }

    fn gap_table(&mut self, profile: &GapProfile) {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["horizon", "index", "min_ratio"]).expect("in-memory CSV");
        for (h, i, r) in profile.rows() {
            w.serialize((h, i, r)).expect("in-memory CSV");
        }
        self.tables.push(("gap_profile.csv".into(), w.into_inner().expect("in-memory CSV")));
    }

    /// Eigenvalue moduli of the return map of `A~` on a periodic orbit.
    fn return_check(&mut self, factors: &[cocycle_core::linalg::Matrix], log_rate: f64) {
        if self.base.period().is_none() || factors.is_empty() {
            return;
        }
        if let Some(spec) = self.stage("return_spectrum", |_| return_spectrum(factors, log_rate)) {
            let tol = self.config.tolerances.eigenvalue_modulus;
            self.verdict("return_eigenvalue_moduli", spec.modulus_gap <= tol);
            self.verdict("return_determinant", spec.det_gap <= tol);
            self.record("return_spectrum", to_value(&spec));
        }
    }

    fn exponents(&mut self) -> Option<()> {
        let sampling = self.config.exponent_sampling();
        let rep = self.stage("exponents", |r| r.cocycle.estimate_exponents(&sampling))?;
        let bounds = self.stage("product_bounds", |r| r.cocycle.product_bounded_diagnostic(&sampling))?;
        let tol = self.config.tolerances.exact_exponent_gap;
        self.verdict("exponent_order", rep.lambda_plus_est >= rep.lambda_minus_est - tol);
        self.verdict("fekete_upper_bound", rep.lambda_plus_est <= rep.lambda_plus_upper + tol);
        self.verdict("fekete_lower_bound", rep.lambda_minus_est >= rep.lambda_minus_lower - tol);
        self.record("exponents", to_value(&rep));
        self.record("product_bounds", to_value(&bounds));
        Some(())
    }

    fn subexponential_warning(&mut self) -> Option<()> {
        let sampling = self.config.exponent_sampling();
        let rep = self.stage("exponents", |r| r.cocycle.estimate_exponents(&sampling))?;
        let tol = if rep.periodic.is_some() {
            self.config.tolerances.exact_exponent_gap
        } else {
            self.config.tolerances.exponent_gap
        };
        if rep.lambda_plus_est.abs() > tol || rep.lambda_minus_est.abs() > tol {
            self.report.warnings.push(format!(
                "exponents ({:.3e}, {:.3e}) are not within {tol:.0e} of 0; growth may not be subexponential",
                rep.lambda_plus_est, rep.lambda_minus_est
            ));
        }
        self.record("exponents", to_value(&rep));
        Some(())
    }

    fn reduction_points(res: &ReductionResult) -> Value {
        Value::Array(
            res.points
                .iter()
                .map(|p| {
                    json!({
                        "point": p.point,
                        "a": rows(&p.a),
                        "r": rows(p.r.gram.matrix()),
                        "r_next": rows(p.r_next.gram.matrix()),
                        "q": rows(p.q.gram.matrix()),
                        "truncation": p.r.truncation_used,
                        "p": rows(p.p.matrix()),
                        "a_tilde": rows(&p.a_tilde),
                        "b": rows(&p.b),
                        "u": rows(&p.u),
                        "residual": p.residual,
                        "slack": p.slack,
                        "u_defect": p.u_defect,
                    })
                })
                .collect(),
        )
    }

    fn reduce(&mut self) -> Option<()> {
        self.subexponential_warning()?;
        let tol = self.config.reduction_tolerances();
        let res = self.stage("reduction", |r| r.cocycle.reduce_unchecked(&r.norm, &r.points, tol))?;
        for (name, ok) in res.diagnostics.verdicts() {
            self.verdict(name, ok);
        }
        self.record("reduction", to_value(&res.diagnostics));
        match isometric_conjugate(&res, tol.orthogonality_defect) {
            Ok(iso) => {
                self.verdict("isometric_conjugate", true);
                self.record("isometric_conjugate", to_value(&iso));
            }
            Err(e) => {
                self.verdict("isometric_conjugate", false);
                self.report.warnings.push(e.to_string());
            }
        }
        let factors: Vec<_> = res.points.iter().map(|p| p.a_tilde.clone()).collect();
        self.return_check(&factors, 0.0);
        if self.full() {
            self.report.points = Some(Self::reduction_points(&res));
        }
        Some(())
    }

    fn conformalize(&mut self, mode: ConformalMode) -> Option<()> {
        let opts = self.config.conformal_options();
        let res = self.stage("conformal", |r| r.cocycle.conformalize(mode, &r.norm, &r.points, &opts))?;
        for (name, ok) in res.diagnostics.verdicts() {
            self.verdict(name, ok);
        }
        self.report.warnings.extend(res.diagnostics.warnings.iter().cloned());
        self.record("conformal", to_value(&res.diagnostics));
        let mean_rate = res.lambda_values.iter().sum::<f64>() / res.lambda_values.len().max(1) as f64;
        self.return_check(&res.a_tilde, mean_rate);
        if self.full() {
            let mut pts = Self::reduction_points(&res.inner);
            if let Value::Array(items) = &mut pts {
                for ((item, l), at) in items.iter_mut().zip(&res.lambda_values).zip(&res.a_tilde) {
                    item["lambda"] = json!(l);
                    item["conformal_a_tilde"] = json!(rows(at));
                }
            }
            self.report.points = Some(pts);
        }
        Some(())
    }

    fn split(&mut self) -> Option<()> {
        let opts = self.config.split_options();
        let sampling = self.config.exponent_sampling();
        let out = self.stage("split", |r| r.cocycle.split(&r.norm, &r.points, &opts, &sampling))?;
        self.gap_table(&out.profile);
        self.verdict("bundle_invariance", out.bundles.max_defect <= opts.angle_tolerance);
        self.verdict("frames_orthonormal", out.bundles.frame_orthonormality <= opts.frame_tolerance);
        if let Some(a) = &out.adapted {
            self.verdict("adapted_domination", a.margin > 1.0);
        }
        self.record("split", to_value(&out));
        if self.full() {
            let pts = out
                .bundles
                .points
                .iter()
                .map(|p| {
                    json!({
                        "point": p.point,
                        "frames": p.frames.iter().map(rows).collect::<Vec<_>>(),
                        "restricted": p.restricted.iter().map(rows).collect::<Vec<_>>(),
                        "invariance_angles": p.defects,
                    })
                })
                .collect();
            self.report.points = Some(Value::Array(pts));
        }
        Some(())
    }

    fn pipeline(&mut self, mode: PipelineMode) -> Option<()> {
        let opts = self.config.split_options();
        let conf = self.config.conformal_options();
        let rep = self.stage("pipeline", |r| r.cocycle.conformal_splitting_pipeline(&r.norm, &r.points, mode, &opts, &conf))?;
        self.gap_table(&rep.profile);
        for (name, ok) in rep.verdicts() {
            self.verdict(name, ok);
        }
        self.report.warnings.extend(rep.warnings.iter().cloned());
        self.record("pipeline", to_value(&rep));
        if self.full() {
            let pts = rep
                .points
                .iter()
                .map(|p| {
                    json!({
                        "point": p.point,
                        "frames": p.frames.iter().map(rows).collect::<Vec<_>>(),
                        "restricted": p.restricted.iter().map(rows).collect::<Vec<_>>(),
                        "lambda_reference": p.lambda_reference,
                        "lambda_adapted": p.lambda_adapted,
                        "lambda_effective": p.lambda_effective,
                        "metric": rows(&p.metric),
                        "a_tilde": rows(&p.a_tilde),
                    })
                })
                .collect();
            self.report.points = Some(Value::Array(pts));
        }
        Some(())
    }

    fn sweep_epsilon(&mut self, values: Vec<f64>) -> Option<()> {
        let tol = self.config.reduction_tolerances();
        let sweep = self.stage("sweep", |r| r.cocycle.epsilon_sweep(&r.norm, &values, &r.points, tol))?;
        let factor = self.config.tolerances.continuity_factor;
        let continuity = sweep.iter().all(|row| match (row.a_tilde_change, row.bound_change) {
            (Some(c), Some(b)) => c <= factor * b,
            _ => true,
        });
        let monotone = sweep.windows(2).all(|w| {
            let dp = w[1].perturbation_size - w[0].perturbation_size;
            let de = w[1].value - w[0].value;
            dp * de > 0.0 || (w[1].perturbation_size == 0.0 && w[0].perturbation_size == 0.0)
        });
        self.verdict("continuity", continuity);
        self.verdict("perturbation_monotone", monotone);
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &sweep {
            w.serialize(row).expect("in-memory CSV");
        }
        self.tables.push(("sweep_epsilon.csv".into(), w.into_inner().expect("in-memory CSV")));
        self.record("sweep", to_value(&sweep));
        Some(())
    }

    fn sweep_horizon(&mut self, values: Vec<usize>) -> Option<()> {
        let samples = self.config.sampling.gap_samples;
        let seed = self.config.sampling.seed;
        let threshold = self.config.tolerances.slope_threshold;
        let profile = self.stage("sweep", |r| r.cocycle.gap_profile(&values, samples, seed, threshold))?;
        #[derive(Serialize)]
        struct Row {
            value: usize,
            index: usize,
            log_min_ratio: f64,
            rate: f64,
            rate_change: Option<f64>,
        }
        let mut out = Vec::new();
        for (h, (value, ratios)) in profile.horizons.iter().zip(&profile.log_min_ratio).enumerate() {
            for (i, l) in ratios.iter().enumerate() {
                let rate = l / *value as f64;
                let rate_change = (h > 0).then(|| rate - profile.log_min_ratio[h - 1][i] / profile.horizons[h - 1] as f64);
                out.push(Row { value: *value, index: i + 1, log_min_ratio: *l, rate, rate_change });
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &out {
            w.serialize(row).expect("in-memory CSV");
        }
        self.tables.push(("sweep_horizon.csv".into(), w.into_inner().expect("in-memory CSV")));
        self.record("sweep", json!({ "profile": to_value(&profile), "rows": to_value(&out) }));
        Some(())
    }
}

/// Builds the experiment from a resolved configuration; failures are
/// configuration errors.
fn prepare(config: ExperimentConfig, command: &Command) -> Result<Runner, ConfigError> {
    let base = config.base.build()?;
    let spec = config.cocycle.build()?;
    let cocycle = Cocycle::new(spec, base.clone()).map_err(|e| ConfigError { path: "cocycle".into(), message: e.to_string() })?;
    let norm = config.norm_config()?;
    let points = base.sample_points(config.sampling.count, config.sampling.seed);
    let report = RunReport {
        command: command.name().to_string(),
        mode: command.mode(),
        base: BaseSummary::of(&base),
        sample_count: points.len(),
        config: config.clone(),
        stages: Vec::new(),
        verdicts: Vec::new(),
        passed: false,
        error: None,
        warnings: Vec::new(),
        points: None,
    };
    Ok(Runner { config, base, cocycle, norm, points, report, timings: Vec::new(), tables: Vec::new() })
}

fn sweep_values(config: &ExperimentConfig, param: SweepParam, values: &Option<Vec<f64>>) -> Result<Vec<f64>, ConfigError> {
    let vals = match (values, param) {
        (Some(v), _) => v.clone(),
        (None, SweepParam::Epsilon) => config.sweep.epsilon.clone(),
        (None, SweepParam::Horizon) => config.sweep.horizon.iter().map(|&h| h as f64).collect(),
    };
    if vals.len() < 2 {
        let field = match param {
            SweepParam::Epsilon => "sweep.epsilon",
            SweepParam::Horizon => "sweep.horizon",
        };
        return Err(ConfigError { path: field.into(), message: "a sweep needs at least two values".into() });
    }
    if param == SweepParam::Horizon && vals.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
        return Err(ConfigError { path: "sweep.horizon".into(), message: "horizons must be positive integers".into() });
    }
    Ok(vals)
}

/// Runs one subcommand on a resolved configuration.
pub fn run(config: ExperimentConfig, command: &Command) -> Result<RunOutcome, ConfigError> {
    let sweep = match command {
        Command::Sweep { param, values } => Some((*param, sweep_values(&config, *param, values)?)),
        _ => None,
    };
    let mut r = prepare(config, command)?;
    match command {
        Command::Exponents => r.exponents(),
        Command::Reduce => r.reduce(),
        Command::Conformalize(mode) => r.conformalize(*mode),
        Command::Split => r.split(),
        Command::Pipeline(mode) => r.pipeline(*mode),
        Command::Sweep { .. } => match sweep.expect("sweep values") {
            (SweepParam::Epsilon, v) => r.sweep_epsilon(v),
            (SweepParam::Horizon, v) => r.sweep_horizon(v.iter().map(|&h| h as usize).collect()),
        },
    };
    r.report.passed = r.report.error.is_none() && r.report.verdicts.iter().all(|v| v.passed);
    Ok(RunOutcome {
        timings: Timings { command: command.name().to_string(), threads: rayon::current_num_threads(), stages: r.timings },
        report: r.report,
        tables: r.tables,
    })
}
