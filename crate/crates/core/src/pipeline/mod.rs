//! Experiment orchestration: reproduces each study end-to-end at desk or
//! full scale, stage by stage, with reproducible seeds, metric tables, CSV
//! artifacts, and SVG plots.

pub mod experiments;
pub mod plot;
pub mod zigzag;

use serde::{Deserialize, Serialize};
use sha2::Digest;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::gan::GanError;
use crate::inference::InferenceError;
use crate::nets::NetsError;
use crate::physics::PhysicsError;
use crate::stochastic::StochasticError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    /// Sine-family meta-learning regression.
    SineMeta,
    /// Diffusion-reaction forward problem (known reaction rate).
    DrForward,
    /// Diffusion-reaction inverse problem (reaction-rate field inferred).
    DrInverse,
    /// Fractional diffusion-reaction with an operator surrogate.
    Fractional,
    /// 2-D Darcy flow with an operator surrogate.
    Darcy,
    /// Sliding-window spatio-temporal regression on the synthetic field.
    RiserWindow,
    /// Gaussian-process prior replication and generator comparison.
    GpAppendixB,
    /// Zigzag distribution diagnostic.
    ZigzagAppendixC,
}

impl ExperimentId {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::SineMeta => "sine-meta",
            ExperimentId::DrForward => "dr-forward",
            ExperimentId::DrInverse => "dr-inverse",
            ExperimentId::Fractional => "fractional",
            ExperimentId::Darcy => "darcy",
            ExperimentId::RiserWindow => "riser-window",
            ExperimentId::GpAppendixB => "gp-appendix-b",
            ExperimentId::ZigzagAppendixC => "zigzag-appendix-c",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sine-meta" => ExperimentId::SineMeta,
            "dr-forward" => ExperimentId::DrForward,
            "dr-inverse" => ExperimentId::DrInverse,
            "fractional" => ExperimentId::Fractional,
            "darcy" => ExperimentId::Darcy,
            "riser-window" => ExperimentId::RiserWindow,
            "gp-appendix-b" => ExperimentId::GpAppendixB,
            "zigzag-appendix-c" => ExperimentId::ZigzagAppendixC,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainPrior,
    TrainDeeponet,
    Posterior,
    Baseline,
    Diagnose,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Reduced budgets that complete in minutes on one CPU core.
    Desk,
    /// Full budgets (500k adversarial steps etc.).
    Paper,
}

/// Optional overrides applied on top of the preset (smoke runs, custom
/// budgets). Absent fields keep the preset value.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Overrides {
    pub n_historical: Option<usize>,
    pub gan_steps: Option<usize>,
    pub deeponet_steps: Option<usize>,
    pub burn_in: Option<usize>,
    pub draws: Option<usize>,
    pub covariance_samples: Option<usize>,
    pub meta_steps: Option<usize>,
    pub n_test_windows: Option<usize>,
    pub zigzag_samples: Option<usize>,
    pub compare_gan_steps: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub stage: Stage,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub overrides: Overrides,
}

fn default_preset() -> Preset {
    Preset::Desk
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentId, stage: Stage, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            experiment,
            stage,
            preset: Preset::Desk,
            seed: 0,
            out_dir: out_dir.into(),
            overrides: Overrides::default(),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("cannot read config: {e}")))?;
        serde_json::from_str(&body)
            .map_err(|e| PipelineError::Validation(format!("invalid config: {e}")))
    }

    pub fn hash(&self) -> String {
        let body = serde_json::to_string(self).expect("config json");
        let mut h = sha2::Sha256::new();
        h.update(body.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolved per-run budgets.
#[derive(Clone, Debug, Serialize)]
pub struct Budget {
    pub n_historical: usize,
    pub gan_steps: usize,
    pub deeponet_steps: usize,
    pub deeponet_lr: f64,
    pub burn_in: usize,
    pub draws: usize,
    pub covariance_samples: usize,
    pub meta_steps: usize,
    pub n_test_windows: usize,
    pub zigzag_samples: usize,
    pub compare_gan_steps: usize,
}

impl Budget {
    pub fn resolve(exp: ExperimentId, preset: Preset, ov: &Overrides) -> Budget {
        let desk = matches!(preset, Preset::Desk);
        let gan_steps = if desk { 40_000 } else { 500_000 };
        let n_historical = match (exp, desk) {
            (ExperimentId::SineMeta, _) => 2_000,
            (ExperimentId::DrForward | ExperimentId::DrInverse, true) => 2_000,
            (ExperimentId::DrForward | ExperimentId::DrInverse, false) => 10_000,
            (ExperimentId::Fractional, true) => 2_000,
            (ExperimentId::Fractional, false) => 10_000,
            (ExperimentId::Darcy, true) => 2_000,
            (ExperimentId::Darcy, false) => 30_000,
            (ExperimentId::GpAppendixB, true) => 2_000,
            (ExperimentId::GpAppendixB, false) => 10_000,
            _ => 2_000,
        };
        let (deeponet_steps, deeponet_lr) = match (exp, desk) {
            (ExperimentId::Fractional, true) => (20_000, 1e-4),
            (ExperimentId::Fractional, false) => (100_000, 1e-4),
            (ExperimentId::Darcy, true) => (25_000, 1e-3),
            (ExperimentId::Darcy, false) => (200_000, 1e-3),
            _ => (0, 1e-4),
        };
        let mut b = Budget {
            n_historical,
            gan_steps,
            deeponet_steps,
            deeponet_lr,
            burn_in: 2_000,
            draws: 1_000,
            covariance_samples: 10_000,
            meta_steps: if desk { 10_000 } else { 100_000 },
            n_test_windows: if desk { 20 } else { 48 },
            zigzag_samples: 200_000,
            compare_gan_steps: gan_steps,
        };
        if let Some(v) = ov.n_historical {
            b.n_historical = v;
        }
        if let Some(v) = ov.gan_steps {
            b.gan_steps = v;
        }
        if let Some(v) = ov.deeponet_steps {
            b.deeponet_steps = v;
        }
        if let Some(v) = ov.burn_in {
            b.burn_in = v;
        }
        if let Some(v) = ov.draws {
            b.draws = v;
        }
        if let Some(v) = ov.covariance_samples {
            b.covariance_samples = v;
        }
        if let Some(v) = ov.meta_steps {
            b.meta_steps = v;
        }
        if let Some(v) = ov.n_test_windows {
            b.n_test_windows = v;
        }
        if let Some(v) = ov.zigzag_samples {
            b.zigzag_samples = v;
        }
        if let Some(v) = ov.compare_gan_steps {
            b.compare_gan_steps = v;
        }
        b
    }
}

#[derive(thiserror::Error, Debug)]
pub enum PipelineError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("missing prerequisite artifact {0}; run the producing stage first")]
    MissingArtifact(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// 2 for configuration/validation problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<GanError> for PipelineError {
    fn from(e: GanError) -> Self {
        match e {
            GanError::LayoutMismatch { .. } | GanError::UnsupportedVariable(_) => {
                PipelineError::Validation(e.to_string())
            }
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<PhysicsError> for PipelineError {
    fn from(e: PhysicsError) -> Self {
        PipelineError::Numerical(e.to_string())
    }
}

impl From<NetsError> for PipelineError {
    fn from(e: NetsError) -> Self {
        PipelineError::Numerical(e.to_string())
    }
}

impl From<StochasticError> for PipelineError {
    fn from(e: StochasticError) -> Self {
        match e {
            StochasticError::Io(io) => PipelineError::Io(io),
            StochasticError::CholeskyFailed { .. } => PipelineError::Numerical(e.to_string()),
            _ => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<InferenceError> for PipelineError {
    fn from(e: InferenceError) -> Self {
        PipelineError::Numerical(e.to_string())
    }
}

impl From<crate::baselines::BaselinesError> for PipelineError {
    fn from(e: crate::baselines::BaselinesError) -> Self {
        PipelineError::Numerical(e.to_string())
    }
}

/// Ordered metric table (name, value) written as `metrics.csv`.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Metrics(pub Vec<(String, f64)>);

impl Metrics {
    pub fn push(&mut self, name: &str, value: f64) {
        self.0.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn extend(&mut self, other: Metrics) {
        self.0.extend(other.0);
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "metric,value")?;
        for (n, v) in &self.0 {
            writeln!(f, "{n},{v}")?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> std::io::Result<Metrics> {
        let body = std::fs::read_to_string(path)?;
        let mut out = Metrics::default();
        for line in body.lines().skip(1) {
            if let Some((n, v)) = line.split_once(',') {
                if let Ok(v) = v.parse::<f64>() {
                    out.push(n, v);
                }
            }
        }
        Ok(out)
    }
}

/// Long-format grid statistics: one row per (variable, point).
pub struct GridStats {
    pub rows: Vec<GridStatRow>,
}

pub struct GridStatRow {
    pub var: String,
    pub coord: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub truth: Option<f64>,
}

impl GridStats {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "var,x,y,mean,std,truth")?;
        for r in &self.rows {
            let x = r.coord.first().copied().unwrap_or(f64::NAN);
            let y = r.coord.get(1).map(|v| format!("{v}")).unwrap_or_default();
            let t = r.truth.map(|v| format!("{v}")).unwrap_or_default();
            writeln!(f, "{},{},{},{},{},{}", r.var, x, y, r.mean, r.std, t)?;
        }
        Ok(())
    }
}

/// Record of one pipeline invocation.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub budget: Budget,
    pub artifacts: Vec<String>,
    pub timings_secs: BTreeMap<String, f64>,
    pub metrics: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let body = serde_json::to_string_pretty(self).expect("manifest json");
        std::fs::write(path, body)
    }
}

/// Execute the configured stage(s) and write `manifest.json`,
/// `metrics.csv`, and per-stage artifacts under the output directory.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest, PipelineError> {
    if config.experiment == ExperimentId::ZigzagAppendixC
        && !matches!(config.stage, Stage::Diagnose | Stage::All)
    {
        return Err(PipelineError::Validation(
            "the zigzag diagnostic only supports the diagnose stage".into(),
        ));
    }
    std::fs::create_dir_all(&config.out_dir)?;
    let budget = Budget::resolve(config.experiment, config.preset, &config.overrides);
    let mut manifest = RunManifest {
        config: config.clone(),
        config_hash: config.hash(),
        budget: budget.clone(),
        artifacts: Vec::new(),
        timings_secs: BTreeMap::new(),
        metrics: Vec::new(),
    };
    let mut metrics = Metrics::default();

    let stages: Vec<Stage> = match config.stage {
        Stage::All => vec![
            Stage::GenData,
            Stage::TrainDeeponet,
            Stage::TrainPrior,
            Stage::Posterior,
            Stage::Baseline,
            Stage::Diagnose,
        ],
        s => vec![s],
    };

    for stage in stages {
        let t0 = std::time::Instant::now();
        let stage_metrics =
            experiments::run_stage(config, &budget, stage, &mut manifest.artifacts)?;
        let dt = t0.elapsed().as_secs_f64();
        let name = format!("{stage:?}").to_lowercase();
        manifest.timings_secs.insert(name, dt);
        metrics.extend(stage_metrics);
    }

    manifest.metrics = metrics.0.clone();
    metrics.write_csv(&config.out_dir.join("metrics.csv"))?;
    manifest.write(&config.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// One row of the generator-architecture comparison table.
#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub variant: String,
    pub method: String,
    pub covariance_mse: f64,
    pub rmse: f64,
    pub coverage_2std: f64,
    pub acceptance: f64,
    pub mean_posterior_std: f64,
    pub wall_secs: f64,
    /// Set when the posterior std collapses below half the reference std.
    pub underestimates_uncertainty: bool,
}

pub fn write_compare_csv(rows: &[CompareRow], path: &Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "variant,method,covariance_mse,rmse,coverage_2std,acceptance,mean_posterior_std,wall_secs,underestimates_uncertainty"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.method,
            r.covariance_mse,
            r.rmse,
            r.coverage_2std,
            r.acceptance,
            r.mean_posterior_std,
            r.wall_secs,
            r.underestimates_uncertainty
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig {
            experiment: ExperimentId::DrForward,
            stage: Stage::All,
            preset: Preset::Desk,
            seed: 7,
            out_dir: PathBuf::from("/tmp/x"),
            overrides: Overrides {
                gan_steps: Some(100),
                ..Default::default()
            },
        };
        let body = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&body).unwrap();
        assert_eq!(back.experiment, ExperimentId::DrForward);
        assert_eq!(back.overrides.gan_steps, Some(100));
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn desk_and_paper_budgets() {
        let desk = Budget::resolve(
            ExperimentId::GpAppendixB,
            Preset::Desk,
            &Overrides::default(),
        );
        assert_eq!(desk.gan_steps, 40_000);
        assert_eq!(desk.n_historical, 2_000);
        assert_eq!(desk.burn_in, 2_000);
        assert_eq!(desk.draws, 1_000);
        let paper = Budget::resolve(
            ExperimentId::Darcy,
            Preset::Paper,
            &Overrides::default(),
        );
        assert_eq!(paper.gan_steps, 500_000);
        assert_eq!(paper.n_historical, 30_000);
        assert_eq!(paper.deeponet_steps, 200_000);
    }

    #[test]
    fn overrides_take_precedence() {
        let b = Budget::resolve(
            ExperimentId::SineMeta,
            Preset::Desk,
            &Overrides {
                gan_steps: Some(123),
                draws: Some(50),
                ..Default::default()
            },
        );
        assert_eq!(b.gan_steps, 123);
        assert_eq!(b.draws, 50);
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(PipelineError::Validation("x".into()).exit_code(), 2);
        assert_eq!(
            PipelineError::MissingArtifact(PathBuf::from("a")).exit_code(),
            2
        );
        assert_eq!(PipelineError::Numerical("x".into()).exit_code(), 3);
    }
}
