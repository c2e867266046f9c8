//! Experiment configuration: a flat, strictly-parsed JSON document that
//! fixes the inverse problem, scene statistics, variances, architecture,
//! training hyperparameters, and output paths. Unknown keys are rejected so
//! a typo in a hyperparameter name cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::SceneSpec;
use crate::error::{Error, Result};
use crate::field::{EmissivityMap, ForwardOperator, PsfKernel};
use crate::io::SplitSizes;
use crate::neural::ArchSpec;
use crate::training::TrainConfig;

/// Which inverse problem the forward operator models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Problem {
    /// Deblurring: observation has the same size as the unknown field.
    Restore,
    /// Deblurring plus block-average downsampling by `factor`.
    SuperRes { factor: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsfConfig {
    /// Gaussian blur width; `sigma == 0` means an identity (delta) kernel.
    pub sigma: f64,
    /// Odd kernel side length; ignored when sigma is 0.
    pub size: usize,
}

impl Default for PsfConfig {
    fn default() -> Self {
        Self { sigma: 1.5, size: 9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variances {
    /// Observation noise variance.
    pub v_eps: f64,
    /// Reference noise variance (supervised data generation and J_NN).
    pub v_f: Option<f64>,
    /// Prior variance for the analytic three-term posterior solver.
    pub v_prior: Option<f64>,
}

impl Default for Variances {
    fn default() -> Self {
        Self { v_eps: 0.01, v_f: Some(0.01), v_prior: None }
    }
}

/// Network choice without shapes; shapes are derived from problem + scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchConfig {
    Mlp { hidden: Vec<usize> },
    ConvEd { base_channels: usize, depth: usize },
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::ConvEd { base_channels: 8, depth: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log_csv: PathBuf,
    /// Directory for inference/evaluation artifacts.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.bpnn"),
            log_csv: PathBuf::from("train_log.csv"),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub psf: PsfConfig,
    pub emissivity: EmissivityMap,
    pub scene: SceneSpec,
    pub variances: Variances,
    pub splits: SplitSizes,
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub paths: PathsConfig,
    /// Master seed; all random draws derive from disjoint sub-streams.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: Problem::Restore,
            psf: PsfConfig::default(),
            emissivity: EmissivityMap::Identity,
            scene: SceneSpec::default(),
            variances: Variances::default(),
            splits: SplitSizes { train: 128, val: 32, test: 32 },
            train: TrainConfig::default(),
            arch: ArchConfig::default(),
            paths: PathsConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if let Err(e) = self.scene.validate() {
            problems.push(format!("scene: {e}"));
        }
        if let Err(e) = self.emissivity.validate() {
            problems.push(format!("emissivity: {e}"));
        }
        if self.psf.sigma < 0.0 {
            problems.push("psf.sigma must be non-negative".into());
        }
        if self.psf.sigma > 0.0 && (self.psf.size % 2 == 0 || self.psf.size == 0) {
            problems.push("psf.size must be a positive odd integer".into());
        }
        if self.variances.v_eps <= 0.0 {
            problems.push("variances.v_eps must be strictly positive".into());
        }
        if let Some(v) = self.variances.v_f {
            if v < 0.0 {
                problems.push("variances.v_f must be non-negative".into());
            }
        }
        if let Some(v) = self.variances.v_prior {
            if v <= 0.0 {
                problems.push("variances.v_prior must be strictly positive".into());
            }
        }
        if let Problem::SuperRes { factor } = self.problem {
            if factor < 2 {
                problems.push("super_res factor must be at least 2".into());
            } else if self.scene.width % factor != 0 || self.scene.height % factor != 0 {
                problems.push(format!(
                    "super_res factor {factor} must divide scene dimensions {}x{}",
                    self.scene.width, self.scene.height
                ));
            }
            if matches!(self.arch, ArchConfig::ConvEd { .. }) {
                problems.push(
                    "conv_ed requires equal input/output shapes; use an mlp for super_res"
                        .into(),
                );
            }
        }
        match &self.arch {
            ArchConfig::Mlp { hidden } => {
                if hidden.iter().any(|&h| h == 0) {
                    problems.push("arch.hidden sizes must be positive".into());
                }
            }
            ArchConfig::ConvEd { base_channels, depth } => {
                if *base_channels == 0 || *depth == 0 {
                    problems.push("arch base_channels and depth must be positive".into());
                }
                let div = 1usize << *depth;
                if self.scene.width % div != 0 || self.scene.height % div != 0 {
                    problems.push(format!(
                        "conv_ed depth {depth} needs scene dimensions divisible by {div}"
                    ));
                }
            }
        }
        if let Err(e) = self.effective_train().validate() {
            problems.push(format!("train: {e}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// The training configuration with variances and the master seed filled
    /// in from the experiment-level fields, which are authoritative.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.v_eps = self.variances.v_eps;
        t.v_f = self.variances.v_f;
        t.seed = self.seed;
        t
    }

    pub fn build_operator(&self) -> Result<ForwardOperator> {
        let shape = (self.scene.width, self.scene.height);
        let psf = if self.psf.sigma == 0.0 {
            PsfKernel::delta()
        } else {
            PsfKernel::gaussian(self.psf.size, self.psf.sigma)?
        };
        match self.problem {
            Problem::Restore => {
                ForwardOperator::restoration(shape, psf, self.emissivity.clone())
            }
            Problem::SuperRes { factor } => {
                ForwardOperator::super_resolution(shape, psf, self.emissivity.clone(), factor)
            }
        }
    }

    /// The network maps the observation to the unknown field, so its input
    /// shape is the operator's output shape.
    pub fn build_arch(&self) -> Result<ArchSpec> {
        let op = self.build_operator()?;
        let spec = match &self.arch {
            ArchConfig::Mlp { hidden } => ArchSpec::mlp(
                op.output_shape(),
                op.input_shape(),
                hidden.clone(),
                self.train.dropout_rate,
            ),
            ArchConfig::ConvEd { base_channels, depth } => ArchSpec::conv_ed(
                op.input_shape(),
                *base_channels,
                *depth,
                self.train.dropout_rate,
            ),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses and validates a config file. Syntax errors carry line/column
/// from the JSON parser; semantic errors list every violated invariant.
pub fn config_load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
