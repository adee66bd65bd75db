//! The live stepping loop's state: one simulator, its control mode and an
//! optional recorder. Wall-clock and virtual-time callers drive it alike.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hydrarm_core::plant::ScriptCursor;
use hydrarm_core::{
    regulate, KinematicModel, LogRow, MarkerTuple, PlantConfig, PressureVector, RegulatorConfig,
    RunLog, Simulator, TrajectoryScript, ValveVector,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Manual,
    Script,
    Regulate,
}

/// One 10 Hz snapshot as pushed to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamFrame {
    pub t: f64,
    pub p: PressureVector,
    pub u: ValveVector,
    pub markers: Vec<MarkerTuple>,
    pub theta: Vec<f64>,
    pub mode: Mode,
    /// Forward-model marker estimate, when a model is loaded and enough
    /// history has accumulated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fk: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Valves(ValveVector),
    Regulate(PressureVector),
    RecordStart(String),
    RecordStop,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Reply {
    Mode { mode: Mode },
    Recording { recording: String },
    Saved { path: PathBuf, rows: usize },
}

/// Rejected because of the engine's current state rather than the request.
#[derive(Debug)]
pub struct Conflict(pub String);

impl std::fmt::Display for Conflict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Conflict {}

pub struct Engine {
    sim: Simulator,
    mode: Mode,
    cursor: Option<ScriptCursor>,
    targets: PressureVector,
    regulator: RegulatorConfig,
    recording: Option<(String, Vec<LogRow>)>,
    record_dir: PathBuf,
    fk: Option<KinematicModel>,
    history: VecDeque<(PressureVector, ValveVector)>,
}

impl Engine {
    pub fn new(
        cfg: PlantConfig,
        script: Option<&TrajectoryScript>,
        record_dir: impl AsRef<Path>,
    ) -> Result<Self> {
        let dt = cfg.dt;
        let targets = [cfg.p_amb; 4];
        Ok(Self {
            sim: Simulator::new(cfg)?,
            mode: if script.is_some() {
                Mode::Script
            } else {
                Mode::Manual
            },
            cursor: script.map(|s| ScriptCursor::new(s, dt)),
            targets,
            regulator: RegulatorConfig::default(),
            recording: None,
            record_dir: record_dir.as_ref().to_path_buf(),
            fk: None,
            history: VecDeque::new(),
        })
    }

    pub fn with_forward_model(mut self, fk: KinematicModel) -> Self {
        self.fk = Some(fk);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.recording.is_some()
    }

    /// Applies a command; it takes effect from the next tick.
    pub fn apply(&mut self, cmd: Command) -> Result<Reply> {
        match cmd {
            Command::Valves(u) => {
                self.mode = Mode::Manual;
                self.cursor = None;
                self.sim.set_valves(u);
                Ok(Reply::Mode { mode: self.mode })
            }
            Command::Regulate(targets) => {
                self.mode = Mode::Regulate;
                self.cursor = None;
                self.targets = targets;
                Ok(Reply::Mode { mode: self.mode })
            }
            Command::RecordStart(name) => {
                if let Some((current, _)) = &self.recording {
                    return Err(Conflict(format!("already recording {current:?}")).into());
                }
                self.recording = Some((name.clone(), Vec::new()));
                Ok(Reply::Recording { recording: name })
            }
            Command::RecordStop => {
                let Some((name, rows)) = self.recording.take() else {
                    return Err(Conflict("not recording".into()).into());
                };
                let n = rows.len();
                if n == 0 {
                    bail!("recording {name:?} captured no rows");
                }
                std::fs::create_dir_all(&self.record_dir)
                    .with_context(|| format!("creating {}", self.record_dir.display()))?;
                let path = self.record_dir.join(format!("{name}.jsonl"));
                RunLog::new(rows, 10.0)?.save(&path)?;
                Ok(Reply::Saved { path, rows: n })
            }
        }
    }

    /// Samples the arm and advances one 10 Hz period.
    pub fn tick(&mut self) -> Result<StreamFrame> {
        let mode = self.mode;
        let row = match self.mode {
            Mode::Script => {
                let cursor = self.cursor.as_mut().expect("script mode has a cursor");
                let row = self.sim.tick_scripted(cursor)?;
                let step = self.sim.step_count();
                if step >= cursor.end_step() {
                    if let Some(u) = cursor.due(step) {
                        self.sim.set_valves(u);
                    }
                    self.mode = Mode::Manual;
                    self.cursor = None;
                }
                row
            }
            Mode::Regulate => {
                let u = regulate(&self.targets, &self.sim.state().p, &self.regulator);
                self.sim.set_valves(u);
                self.sim.tick()?
            }
            Mode::Manual => self.sim.tick()?,
        };
        let fk = self.forward_estimate(&row);
        if let Some((_, rows)) = &mut self.recording {
            rows.push(row.clone());
        }
        Ok(StreamFrame {
            t: row.t,
            p: row.p,
            u: row.u,
            markers: row.markers,
            theta: row.theta,
            mode,
            fk,
        })
    }

    fn forward_estimate(&mut self, row: &LogRow) -> Option<Vec<[f64; 2]>> {
        let fk = self.fk.as_ref()?;
        let window = *fk.window()?;
        // history is kept at 10 Hz; the model looks back in 2 Hz steps
        let stride = (10.0 / window.model_rate).round() as usize * window.tau;
        let span = stride * window.n + 1;
        self.history.push_front((row.p, row.u));
        self.history.truncate(span);
        if self.history.len() < span {
            return None;
        }
        let picks: Vec<_> = (0..=window.n).map(|i| self.history[i * stride]).collect();
        let xy = fk.predict_fk(&picks).ok()?;
        Some(xy.into_iter().map(|(x, y)| [x, y]).collect())
    }
}
