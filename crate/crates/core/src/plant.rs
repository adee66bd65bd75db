//! Valve-driven actuator pressures and hysteretic module bending.
//!
//! Each actuator fills from the pump through its in-valve and drains to the
//! tank through its out-valve, both as first-order flows. When both of its
//! valves are shut, bending of the module squeezes or relaxes it. Bending is
//! driven by the right-minus-left pressure difference through a play
//! (backlash) operator, a tanh saturation and a first-order lag.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datapipe::{LogRow, RunLog};
use crate::error::{Error, Result};
use crate::geometry::{ArmGeometry, MarkerTuple};

pub const ACTUATORS: usize = 4;
pub const MODULES: usize = 2;
pub const VALVES: usize = 2 * ACTUATORS;

/// Sensor / normalization range of every actuator pressure, kPa.
pub const PRESSURE_MIN: f64 = 95.0;
pub const PRESSURE_MAX: f64 = 121.0;

/// Actuator pressures in kPa, ordered `[P11, P12, P21, P22]` (module, side),
/// side 1 = left, 2 = right.
pub type PressureVector = [f64; ACTUATORS];

/// Solenoid states ordered `[in11, out11, in12, out12, in21, out21, in22, out22]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct ValveVector(pub [bool; VALVES]);

impl ValveVector {
    pub const CLOSED: ValveVector = ValveVector([false; VALVES]);

    pub fn in_open(&self, actuator: usize) -> bool {
        self.0[2 * actuator]
    }

    pub fn out_open(&self, actuator: usize) -> bool {
        self.0[2 * actuator + 1]
    }

    pub fn set(&mut self, actuator: usize, inlet: bool, outlet: bool) {
        self.0[2 * actuator] = inlet;
        self.0[2 * actuator + 1] = outlet;
    }

    pub fn bits(&self) -> [f64; VALVES] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }
}

impl TryFrom<Vec<u8>> for ValveVector {
    type Error = String;

    fn try_from(v: Vec<u8>) -> std::result::Result<Self, Self::Error> {
        if v.len() != VALVES {
            return Err(format!(
                "valve vector needs {VALVES} entries, got {}",
                v.len()
            ));
        }
        let mut out = [false; VALVES];
        for (o, b) in out.iter_mut().zip(&v) {
            *o = match b {
                0 => false,
                1 => true,
                other => return Err(format!("valve state must be 0 or 1, got {other}")),
            };
        }
        Ok(ValveVector(out))
    }
}

impl From<ValveVector> for Vec<u8> {
    fn from(v: ValveVector) -> Self {
        v.0.iter().map(|&b| b as u8).collect()
    }
}

/// Index of the actuator for `(module, side)`, both zero-based.
pub fn actuator_index(module: usize, side: usize) -> usize {
    2 * module + side
}

/// Right-minus-left pressure difference of `module`.
pub fn pressure_diff(p: &PressureVector, module: usize) -> f64 {
    p[2 * module + 1] - p[2 * module]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    /// Tank / ambient pressure, kPa.
    pub p_amb: f64,
    /// Pump supply pressure, kPa.
    pub p_pump: f64,
    /// Fill rate constant, 1/s.
    pub c_in: f64,
    /// Drain rate constant, 1/s.
    pub c_out: f64,
    /// Play half-width per module, kPa.
    pub play_width: [f64; MODULES],
    /// Pressure scale of the tanh bend saturation, kPa.
    pub z_scale: f64,
    /// Bend lag time constants per module, s.
    pub bend_lag: [f64; MODULES],
    /// Squeeze coupling of a sealed actuator, kPa per rad.
    pub kappa_c: f64,
    /// Integration step, s.
    pub dt: f64,
    /// Pressure sensor noise std, kPa.
    pub sigma_p: f64,
    /// Marker position noise std, m.
    pub sigma_xy: f64,
    pub seed: u64,
    pub geometry: ArmGeometry,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            p_amb: 96.0,
            p_pump: 120.0,
            c_in: 0.15,
            c_out: 0.10,
            play_width: [3.7, 0.4],
            z_scale: 14.0,
            bend_lag: [4.0, 2.0],
            kappa_c: 12.0,
            dt: 0.01,
            sigma_p: 0.1,
            sigma_xy: 0.0005,
            seed: 0,
            geometry: ArmGeometry::default(),
        }
    }
}

impl PlantConfig {
    /// Same dynamics with observation noise switched off.
    pub fn noiseless(mut self) -> Self {
        self.sigma_p = 0.0;
        self.sigma_xy = 0.0;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.geometry.module_count != MODULES {
            return Err(Error::invalid(format!(
                "the plant simulates exactly {MODULES} modules"
            )));
        }
        let positive = [
            self.c_in,
            self.c_out,
            self.z_scale,
            self.bend_lag[0],
            self.bend_lag[1],
            self.dt,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid(
                "rates, time constants and dt must be positive",
            ));
        }
        if self.dt > 0.02 {
            return Err(Error::invalid("dt must not exceed 0.02 s"));
        }
        if !(self.p_amb < self.p_pump) {
            return Err(Error::invalid(
                "ambient pressure must be below pump pressure",
            ));
        }
        if self.play_width.iter().any(|w| !(*w >= 0.0)) || !(self.kappa_c >= 0.0) {
            return Err(Error::invalid(
                "play width and coupling must be non-negative",
            ));
        }
        if !(self.sigma_p >= 0.0) || !(self.sigma_xy >= 0.0) {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        Ok(())
    }

    /// Integration steps per 10 Hz log sample.
    pub fn steps_per_sample(&self) -> usize {
        (LOG_PERIOD / self.dt).round() as usize
    }
}

/// Log / command period, s.
pub const LOG_PERIOD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub t: f64,
    pub p: PressureVector,
    pub u: ValveVector,
    pub theta: [f64; MODULES],
    /// Play-operator output per module, kPa.
    pub z: [f64; MODULES],
}

impl ArmState {
    /// Everything at ambient, valves shut, arm straight.
    pub fn at_rest(cfg: &PlantConfig) -> Self {
        Self {
            t: 0.0,
            p: [cfg.p_amb; ACTUATORS],
            u: ValveVector::CLOSED,
            theta: [0.0; MODULES],
            z: [0.0; MODULES],
        }
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.t.is_finite()
            && self.p.iter().all(|v| v.is_finite())
            && self.theta.iter().all(|v| v.is_finite())
            && self.z.iter().all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("arm state"))
        }
    }
}

/// Play operator: the output follows the input only once it leaves the band.
pub fn play(input: f64, width: f64, z: f64) -> f64 {
    (input + width).min((input - width).max(z))
}

fn bend_rates(state: &ArmState, cfg: &PlantConfig) -> [f64; MODULES] {
    let theta_max = cfg.geometry.theta_max;
    std::array::from_fn(|m| {
        let target = theta_max * (state.z[m] / cfg.z_scale).tanh();
        (target - state.theta[m]) / cfg.bend_lag[m]
    })
}

/// Advances the plant by one explicit-Euler step of `cfg.dt` under `cmd`.
pub fn step(state: &ArmState, cmd: ValveVector, cfg: &PlantConfig) -> Result<ArmState> {
    state.check_finite()?;
    let dt = cfg.dt;
    let rates = bend_rates(state, cfg);

    let mut p = state.p;
    for (a, pa) in p.iter_mut().enumerate() {
        let module = a / 2;
        // Left actuators squeeze as the module unbends, right ones as it bends.
        let side_sign = if a % 2 == 0 { 1.0 } else { -1.0 };
        let (inlet, outlet) = (cmd.in_open(a), cmd.out_open(a));
        let mut dp = 0.0;
        if inlet {
            dp += cfg.c_in * (cfg.p_pump - state.p[a]);
        }
        if outlet {
            dp -= cfg.c_out * (state.p[a] - cfg.p_amb);
        }
        if !inlet && !outlet {
            dp -= cfg.kappa_c * rates[module] * side_sign;
        }
        *pa = (state.p[a] + dt * dp).clamp(PRESSURE_MIN, PRESSURE_MAX);
    }

    let theta_max = cfg.geometry.theta_max;
    let mut z = state.z;
    let mut theta = state.theta;
    for m in 0..MODULES {
        z[m] = play(pressure_diff(&p, m), cfg.play_width[m], z[m]);
        theta[m] = (theta[m] + dt * rates[m]).clamp(-theta_max, theta_max);
    }

    Ok(ArmState {
        t: state.t + dt,
        p,
        u: cmd,
        theta,
        z,
    })
}

/// Noisy sensor readings and marker positions of `state`.
pub fn observe(
    state: &ArmState,
    cfg: &PlantConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PressureVector, Vec<MarkerTuple>)> {
    let mut markers = cfg.geometry.marker_positions(&state.theta)?;
    let mut p = state.p;
    if cfg.sigma_p > 0.0 {
        let n = Normal::new(0.0, cfg.sigma_p).map_err(|e| Error::invalid(e.to_string()))?;
        for v in &mut p {
            *v += n.sample(rng);
        }
    }
    if cfg.sigma_xy > 0.0 {
        let n = Normal::new(0.0, cfg.sigma_xy).map_err(|e| Error::invalid(e.to_string()))?;
        for m in &mut markers {
            m.x += n.sample(rng);
            m.y += n.sample(rng);
        }
    }
    Ok((p, markers))
}

/// One valve command taking effect at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptEvent {
    pub t: f64,
    pub u: ValveVector,
}

/// Time-ordered valve schedule. The last event marks the end of the run.
///
/// On disk this is a bare JSON array of `{"t": seconds, "u": [8 x 0/1]}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrajectoryScript {
    pub events: Vec<ScriptEvent>,
}

impl TrajectoryScript {
    pub fn new(events: Vec<ScriptEvent>) -> Result<Self> {
        let s = Self { events };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.events {
            if !e.t.is_finite() || e.t < 0.0 {
                return Err(Error::invalid(
                    "script times must be finite and non-negative",
                ));
            }
        }
        if self.events.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::invalid("script times must be strictly increasing"));
        }
        Ok(())
    }

    /// Time of the final event, or 0 for an empty script.
    pub fn duration(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let s: Self = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

/// Owns the arm state and the observation noise stream.
///
/// Headless collection and the live service drive the same stepping code.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: PlantConfig,
    state: ArmState,
    rng: ChaCha8Rng,
    steps: u64,
}

impl Simulator {
    pub fn new(cfg: PlantConfig) -> Result<Self> {
        cfg.validate()?;
        let state = ArmState::at_rest(&cfg);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            state,
            rng,
            steps: 0,
        })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ArmState {
        &self.state
    }

    pub fn set_valves(&mut self, u: ValveVector) {
        self.state.u = u;
    }

    pub fn step_count(&self) -> u64 {
        self.steps
    }

    /// One integration step under the currently latched valves.
    pub fn step(&mut self) -> Result<()> {
        let mut next = step(&self.state, self.state.u, &self.cfg)?;
        self.steps += 1;
        // Recompute from the step count so long runs do not accumulate drift.
        next.t = self.steps as f64 * self.cfg.dt;
        self.state = next;
        Ok(())
    }

    /// Observes the current state as a log row.
    pub fn sample(&mut self) -> Result<LogRow> {
        let (p, markers) = observe(&self.state, &self.cfg, &mut self.rng)?;
        Ok(LogRow {
            t: self.state.t,
            p,
            u: self.state.u,
            markers,
            theta: self.state.theta.to_vec(),
        })
    }

    /// Records a row, then advances one 10 Hz period.
    pub fn tick(&mut self) -> Result<LogRow> {
        let row = self.sample()?;
        for _ in 0..self.cfg.steps_per_sample() {
            self.step()?;
        }
        Ok(row)
    }

    /// Like [`Simulator::tick`], applying script commands as their steps
    /// come due.
    pub fn tick_scripted(&mut self, cursor: &mut ScriptCursor) -> Result<LogRow> {
        let mut row = None;
        for _ in 0..self.cfg.steps_per_sample() {
            if let Some(u) = cursor.due(self.steps) {
                self.set_valves(u);
            }
            if row.is_none() {
                row = Some(self.sample()?);
            }
            self.step()?;
        }
        Ok(row.expect("at least one step per sample"))
    }
}

/// Plays `script` open-loop from rest and logs at 10 Hz.
pub fn run_scripted(cfg: &PlantConfig, script: &TrajectoryScript) -> Result<RunLog> {
    run_scripted_for(cfg, script, script.duration())
}

/// Like [`run_scripted`] with an explicit run length.
pub fn run_scripted_for(
    cfg: &PlantConfig,
    script: &TrajectoryScript,
    duration: f64,
) -> Result<RunLog> {
    script.validate()?;
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::invalid("script duration must be positive"));
    }
    let mut sim = Simulator::new(cfg.clone())?;
    let mut cursor = ScriptCursor::new(script, cfg.dt);
    let total_steps = (duration / cfg.dt).round() as u64;
    let per_sample = cfg.steps_per_sample() as u64;
    let mut rows = Vec::with_capacity((total_steps / per_sample + 1) as usize);
    while sim.step_count() < total_steps {
        rows.push(sim.tick_scripted(&mut cursor)?);
    }
    RunLog::new(rows, 1.0 / LOG_PERIOD)
}

/// Replay position in a script, in integration steps.
#[derive(Debug, Clone)]
pub struct ScriptCursor {
    events: Vec<(u64, ValveVector)>,
    next: usize,
}

impl ScriptCursor {
    pub fn new(script: &TrajectoryScript, dt: f64) -> Self {
        Self {
            events: script
                .events
                .iter()
                .map(|e| ((e.t / dt).round() as u64, e.u))
                .collect(),
            next: 0,
        }
    }

    /// Latest command due at or before `step`, consuming it.
    pub fn due(&mut self, step: u64) -> Option<ValveVector> {
        let mut u = None;
        while let Some(&(k, cmd)) = self.events.get(self.next) {
            if k > step {
                break;
            }
            u = Some(cmd);
            self.next += 1;
        }
        u
    }

    pub fn finished(&self) -> bool {
        self.next >= self.events.len()
    }

    /// Step of the last event, where the script ends.
    pub fn end_step(&self) -> u64 {
        self.events.last().map_or(0, |e| e.0)
    }
}

/// The characterization protocol: fill both right actuators for 31 s, then
/// drain them for 42 s.
pub fn actuation_protocol() -> TrajectoryScript {
    let mut fill = ValveVector::CLOSED;
    fill.set(actuator_index(0, 1), true, false);
    fill.set(actuator_index(1, 1), true, false);
    let mut drain = ValveVector::CLOSED;
    drain.set(actuator_index(0, 1), false, true);
    drain.set(actuator_index(1, 1), false, true);
    TrajectoryScript {
        events: vec![
            ScriptEvent { t: 0.0, u: fill },
            ScriptEvent { t: 31.0, u: drain },
            ScriptEvent {
                t: 73.0,
                u: ValveVector::CLOSED,
            },
        ],
    }
}

/// Bend (rad) above which a module counts as moving.
pub const ONSET_ANGLE: f64 = 1e-6;

/// Shape of the pressure-difference/bend response to [`actuation_protocol`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisLandmarks {
    /// Module-1 pressure difference at the first logged row where it bends.
    pub onset_diff: f64,
    /// Module-1 pressure difference at the end of the cycle.
    pub post_cycle_diff: f64,
    /// Area enclosed by each module's (P_diff, theta) trace, kPa*rad.
    pub loop_area: [f64; MODULES],
    /// Seconds for the filled actuator to cover 90% of its rise.
    pub fill_seconds: f64,
    /// Seconds for it to cover 90% of its fall once draining starts.
    pub drain_seconds: f64,
}

/// Shoelace area of the closed polygon through `pts`.
pub fn enclosed_area(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    0.5 * twice.abs()
}

/// Runs the characterization protocol noiselessly and extracts landmarks.
pub fn characterize(cfg: &PlantConfig) -> Result<HysteresisLandmarks> {
    let quiet = cfg.clone().noiseless();
    let script = actuation_protocol();
    let log = run_scripted(&quiet, &script)?;
    let rows = &log.rows;
    let drain_start = script.events[1].t;
    let diff = |r: &LogRow, m: usize| pressure_diff(&r.p, m);

    let onset_diff = rows
        .iter()
        .find(|r| r.theta[0].abs() > ONSET_ANGLE)
        .map(|r| diff(r, 0))
        .ok_or(Error::Empty("module 1 never bends"))?;
    let last = rows.last().ok_or(Error::Empty("characterization log"))?;
    let loop_area = std::array::from_fn(|m| {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (diff(r, m), r.theta[m])).collect();
        enclosed_area(&pts)
    });

    let filled = actuator_index(0, 1);
    let p0 = rows[0].p[filled];
    let (fill_rows, drain_rows): (Vec<&LogRow>, Vec<&LogRow>) =
        rows.iter().partition(|r| r.t < drain_start - 1e-9);
    let peak = fill_rows.last().map_or(p0, |r| r.p[filled]);
    let floor = last.p[filled];
    let fill_seconds = fill_rows
        .iter()
        .find(|r| r.p[filled] - p0 >= 0.9 * (peak - p0))
        .map_or(f64::NAN, |r| r.t);
    let drain_seconds = drain_rows
        .iter()
        .find(|r| peak - r.p[filled] >= 0.9 * (peak - floor))
        .map_or(f64::NAN, |r| r.t - drain_start);

    Ok(HysteresisLandmarks {
        onset_diff,
        post_cycle_diff: diff(last, 0),
        loop_area,
        fill_seconds,
        drain_seconds,
    })
}
