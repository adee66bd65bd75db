//! End-to-end glue: scripts to logs, logs to datasets, datasets to models and
//! reports, plus the closed-loop shape-reaching check.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::{coverage_scripts, regulate, CoveragePlan, RegulatorConfig};
use crate::datapipe::{
    build_fk_windows, build_ik_samples, decimate, split, NormalizationSpec, RunLog, WindowConfig,
    WindowedSample,
};
use crate::error::{Error, Result};
use crate::kinlearn::{evaluate, train, EvalReport, KinematicModel, ModelKind, TrainConfig};
use crate::nnet::Checkpoint;
use crate::plant::{run_scripted, PlantConfig, Simulator, TrajectoryScript};

/// Plays every script with observation noise; run `i` draws noise from
/// `seed + i`.
pub fn collect_runs(
    cfg: &PlantConfig,
    scripts: &[TrajectoryScript],
    seed: u64,
) -> Result<Vec<RunLog>> {
    scripts
        .iter()
        .enumerate()
        .map(|(i, s)| run_scripted(&cfg.clone().with_seed(seed.wrapping_add(i as u64)), s))
        .collect()
}

/// Model-rate samples of one kind pooled over all runs.
pub fn build_samples(
    kind: ModelKind,
    logs: &[RunLog],
    window: &WindowConfig,
    norm: &NormalizationSpec,
) -> Result<Vec<WindowedSample>> {
    let mut out = Vec::new();
    for log in logs {
        let low = decimate(log, window.model_rate)?;
        match kind {
            ModelKind::Fk => out.extend(build_fk_windows(&low, window, norm)?),
            ModelKind::Ik => out.extend(build_ik_samples(&low, norm)?),
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(out)
}

/// Run logs in a directory: every `*.jsonl`, in file-name order.
pub fn load_run_dir(dir: impl AsRef<Path>) -> Result<Vec<RunLog>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty("run directory"));
    }
    paths.iter().map(RunLog::load).collect()
}

/// Train/test partition; the split is seeded by the training seed so
/// evaluation can rebuild the held-out part from a checkpoint.
pub fn train_test(
    samples: &[WindowedSample],
    tc: &TrainConfig,
) -> Result<(Vec<WindowedSample>, Vec<WindowedSample>)> {
    split(samples, tc.split, tc.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub plant: PlantConfig,
    pub plan: CoveragePlan,
    pub script_seed: u64,
    pub noise_seed: u64,
    pub window: WindowConfig,
    pub norm: NormalizationSpec,
    pub fk_train: TrainConfig,
    /// The inverse model trains at half the forward model's step size.
    pub ik_train: TrainConfig,
}

impl PipelineConfig {
    pub fn train_config(&self, kind: ModelKind) -> &TrainConfig {
        match kind {
            ModelKind::Fk => &self.fk_train,
            ModelKind::Ik => &self.ik_train,
        }
    }

    /// Same seed for both models.
    pub fn with_train_seed(mut self, seed: u64) -> Self {
        self.fk_train.seed = seed;
        self.ik_train.seed = seed;
        self
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            plant: PlantConfig::default(),
            plan: CoveragePlan::default(),
            script_seed: 0,
            noise_seed: 1,
            window: WindowConfig::default(),
            norm: NormalizationSpec::default(),
            fk_train: TrainConfig::default(),
            ik_train: TrainConfig {
                lr: 5e-4,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedPair {
    pub fk: Checkpoint,
    pub ik: Checkpoint,
    pub fk_report: EvalReport,
    pub ik_report: EvalReport,
}

/// Trains and evaluates one kind on pooled logs.
pub fn train_and_evaluate(
    kind: ModelKind,
    logs: &[RunLog],
    pc: &PipelineConfig,
) -> Result<(Checkpoint, EvalReport)> {
    let tc = pc.train_config(kind);
    let samples = build_samples(kind, logs, &pc.window, &pc.norm)?;
    let (tr, te) = train_test(&samples, tc)?;
    let ckpt = train(kind, &tr, tc, &pc.norm, &pc.window)?;
    let report = evaluate(&KinematicModel::from_checkpoint(&ckpt)?, &te)?;
    Ok((ckpt, report))
}

/// Scripts, logs, both models and their reports.
pub fn run_pipeline(
    pc: &PipelineConfig,
) -> Result<(Vec<TrajectoryScript>, Vec<RunLog>, TrainedPair)> {
    let scripts = coverage_scripts(&pc.plan, &pc.plant, pc.script_seed)?;
    let logs = collect_runs(&pc.plant, &scripts, pc.noise_seed)?;
    let (fk, fk_report) = train_and_evaluate(ModelKind::Fk, &logs, pc)?;
    let (ik, ik_report) = train_and_evaluate(ModelKind::Ik, &logs, pc)?;
    Ok((
        scripts,
        logs,
        TrainedPair {
            fk,
            ik,
            fk_report,
            ik_report,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachOutcome {
    pub target_theta: [f64; 2],
    pub commanded: [f64; 4],
    pub final_theta: [f64; 2],
    /// First time the tip came within tolerance, seconds.
    pub reached_at: Option<f64>,
    /// Tip distance at the end of the horizon, meters.
    pub final_error: f64,
}

/// Starts the plant at rest, asks the inverse model for pressures that hold
/// the bend pair `target`, and regulates toward them for `horizon` seconds.
pub fn reach_shape(
    ik: &KinematicModel,
    cfg: &PlantConfig,
    rc: &RegulatorConfig,
    target: [f64; 2],
    horizon: f64,
    tolerance: f64,
) -> Result<ReachOutcome> {
    let geom = &cfg.geometry;
    let goal = geom.marker_positions(&target)?;
    let goal_tip = *goal.last().expect("markers");
    let xy: Vec<(f64, f64)> = goal.iter().map(|m| (m.x, m.y)).collect();
    let commanded = ik.predict_ik(&xy)?;

    let mut sim = Simulator::new(cfg.clone().noiseless())?;
    let per_update = (1.0 / (rc.rate_hz * cfg.dt)).round().max(1.0) as u64;
    let total = (horizon / cfg.dt).round() as u64;
    let mut reached_at = None;
    for k in 0..total {
        if k % per_update == 0 {
            let u = regulate(&commanded, &sim.state().p, rc);
            sim.set_valves(u);
        }
        sim.step()?;
        if reached_at.is_none() {
            let tip = geom.tip(&sim.state().theta)?;
            if tip.distance(&goal_tip) <= tolerance {
                reached_at = Some(sim.state().t);
            }
        }
    }
    let final_theta = sim.state().theta;
    let final_error = geom.tip(&final_theta)?.distance(&goal_tip);
    Ok(ReachOutcome {
        target_theta: target,
        commanded,
        final_theta,
        reached_at,
        final_error,
    })
}
