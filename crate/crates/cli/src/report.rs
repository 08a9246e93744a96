//! Report documents written by every subcommand.

use cocycle_core::dynamics::BaseDynamics;
use cocycle_core::linalg::Matrix;
use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;

pub const CERTIFICATION: &str = "claims over the base are certified on the sampled points and the orbit points visited";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseSummary {
    pub description: String,
    pub uniquely_ergodic: bool,
    pub minimal: bool,
    pub certification: &'static str,
}

impl BaseSummary {
    pub fn of(base: &BaseDynamics) -> Self {
        BaseSummary {
            description: base.describe(),
            uniquely_ergodic: base.uniquely_ergodic,
            minimal: base.minimal,
            certification: CERTIFICATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageResult {
    pub stage: String,
    pub result: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

/// Deterministic given the configuration and seed; wall-clock data lives in
/// a separate timings file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub mode: Option<String>,
    pub base: BaseSummary,
    pub config: ExperimentConfig,
    pub sample_count: usize,
    pub stages: Vec<StageResult>,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
    pub error: Option<StageFailure>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<Value>,
}

impl RunReport {
    pub fn stage(&self, name: &str) -> Option<&Value> {
        self.stages.iter().find(|s| s.stage == name).map(|s| &s.result)
    }

    pub fn verdict(&self, name: &str) -> Option<bool> {
        self.verdicts.iter().find(|v| v.name == name).map(|v| v.passed)
    }

    pub fn failed_verdicts(&self) -> Vec<&str> {
        self.verdicts.iter().filter(|v| !v.passed).map(|v| v.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timings {
    pub command: String,
    pub threads: usize,
    pub stages: Vec<StageTiming>,
}

/// Row-major nested arrays.
pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
