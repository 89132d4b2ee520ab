use polydiff_core::diffusion::DiffusionOptions;
use polydiff_core::melnikov::{BoxPolicy, MelnikovOptions};
use polydiff_core::model::{PerturbationSpec, SystemParams, Term};
use polydiff_core::transition::{OuterBoundary, TransitionOptions};
use polydiff_core::variational::SolverOptions;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use crate::error::CliError;

/// Whole experiment description, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seed for the randomized projection checks.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 lets the pool pick.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub melnikov: MelnikovStage,
    #[serde(default, rename = "loop")]
    pub loop_stage: LoopStage,
    #[serde(default)]
    pub transition: TransitionStage,
    #[serde(default)]
    pub diffuse: DiffuseStage,
    #[serde(default)]
    pub scaling: ScalingStage,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub mu: f64,
    #[serde(default = "default_a0")]
    pub a0: f64,
    #[serde(default)]
    pub perturbation: Perturbation,
}

fn default_a0() -> f64 {
    10.0
}

/// A preset name or an explicit list of terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Perturbation {
    Preset(String),
    Terms(Vec<Term>),
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation::Preset("arnold".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelnikovStage {
    /// Frequencies at which fields and certificates are written.
    pub omega: Vec<f64>,
    pub n_t: usize,
    pub n_q: usize,
    /// Optional certification sweep `[lo, hi]` with `step`.
    pub certify_range: Option<[f64; 2]>,
    pub certify_step: f64,
    pub refinement_tol: f64,
    pub box_policy: BoxPolicy,
    pub options: MelnikovOptions,
}

impl Default for MelnikovStage {
    fn default() -> Self {
        Self {
            omega: vec![1.0],
            n_t: 65,
            n_q: 65,
            certify_range: None,
            certify_step: 0.01,
            refinement_tol: 1e-10,
            box_policy: BoxPolicy::default(),
            options: MelnikovOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopStage {
    #[serde(rename = "T0")]
    pub t0: f64,
    #[serde(rename = "T1")]
    pub t1: Option<f64>,
    #[serde(rename = "Q0")]
    pub rotor0: f64,
    /// Used when `Q1` is absent: `Q1 = Q0 + ω (T1 − T0)`.
    pub omega: f64,
    #[serde(rename = "Q1")]
    pub rotor1: Option<f64>,
    pub solver: SolverOptions,
}

impl Default for LoopStage {
    fn default() -> Self {
        Self {
            t0: PI,
            t1: None,
            rotor0: PI,
            omega: 1.0,
            rotor1: None,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransitionStage {
    pub omega1: f64,
    pub omega2: f64,
    /// Defaults to two minimal loops from `(π, π)` at the mean frequency.
    pub outer: Option<OuterBoundary>,
    /// Side of the junction grid for the `F_Y` regression; 0 skips it.
    pub regression_grid: usize,
    /// Random perturbed curves for the projection check; 0 skips it.
    pub projection_samples: usize,
    pub projection_amplitude: f64,
    pub refinement_tol: f64,
    pub box_policy: BoxPolicy,
    pub options: TransitionOptions,
}

impl Default for TransitionStage {
    fn default() -> Self {
        Self {
            omega1: 1.0,
            omega2: 1.02,
            outer: None,
            regression_grid: 0,
            projection_samples: 0,
            projection_amplitude: 1e-2,
            refinement_tol: 1e-10,
            box_policy: BoxPolicy::default(),
            options: TransitionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffuseStage {
    pub omega_start: f64,
    pub omega_end: f64,
    pub write_curve: bool,
    pub options: DiffusionOptions,
}

impl Default for DiffuseStage {
    fn default() -> Self {
        Self {
            omega_start: 1.0,
            omega_end: 2.0,
            write_curve: true,
            options: DiffusionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingStage {
    pub mu: Vec<f64>,
    pub omega_start: f64,
    pub omega_end: f64,
    pub options: DiffusionOptions,
}

impl Default for ScalingStage {
    fn default() -> Self {
        Self {
            mu: vec![0.05, 0.025, 0.0125],
            omega_start: 1.0,
            omega_end: 2.0,
            options: DiffusionOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.system_params()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn system_params(&self) -> Result<SystemParams, CliError> {
        let perturbation = match &self.system.perturbation {
            Perturbation::Preset(name) => PerturbationSpec::preset(name).ok_or_else(|| {
                CliError::Config(format!("system.perturbation: unknown preset {name:?} (expected \"arnold\" or \"zero\")"))
            })?,
            Perturbation::Terms(terms) => PerturbationSpec::new(terms.clone()),
        };
        let s = SystemParams::new(self.system.mu, self.system.a0, perturbation);
        s.validate().map_err(|m| CliError::Config(format!("system: {m}")))?;
        Ok(s)
    }
}
