//! Valve-level control: a bang-bang pressure regulator and the generator of
//! data-collection scripts.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::RunLog;
use crate::error::{Error, Result};
use crate::plant::{
    actuator_index, pressure_diff, step, ArmState, PlantConfig, PressureVector, ScriptEvent,
    TrajectoryScript, ValveVector, ACTUATORS, LOG_PERIOD, MODULES,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegulatorConfig {
    /// kPa
    pub deadband: f64,
    pub rate_hz: f64,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self {
            deadband: 0.5,
            rate_hz: 10.0,
        }
    }
}

impl RegulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.deadband > 0.0) || !(self.rate_hz > 0.0) {
            return Err(Error::invalid("deadband and update rate must be positive"));
        }
        Ok(())
    }
}

/// Bang-bang valve command driving each actuator toward its target.
pub fn regulate(
    target: &PressureVector,
    current: &PressureVector,
    rc: &RegulatorConfig,
) -> ValveVector {
    let mut u = ValveVector::CLOSED;
    for a in 0..ACTUATORS {
        let err = target[a] - current[a];
        if err > rc.deadband {
            u.set(a, true, false);
        } else if err < -rc.deadband {
            u.set(a, false, true);
        }
    }
    u
}

/// Knobs of the data-collection suite.
///
/// Each module runs its own sequence of bending excursions. The drive
/// pressure difference jumps to just inside the backlash band, ramps to a
/// peak and dwells there. It is then reversed slightly until the bending
/// side has drained, so the backlash ends centered, and rests at zero before
/// the next excursion goes the other way. The antagonist stays vented except
/// during the reversal. The regulator tracks the drive and the resulting
/// valve switching is recorded as the script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveragePlan {
    pub runs: usize,
    /// Run length range, seconds.
    pub run_seconds: (f64, f64),
    /// Excursion peak |P_diff| range, kPa.
    pub peak: (f64, f64),
    /// Ramp-up rate range per module, kPa/s. The module with the wider
    /// backlash ramps slower so its lag stays small against the band.
    pub ramp_rate: [(f64, f64); MODULES],
    /// Ramp start as a fraction of the module's backlash width.
    pub ramp_start: f64,
    /// Dwell at the peak, seconds.
    pub top_hold: (f64, f64),
    /// Reverse drive as a fraction of the module's backlash width.
    pub flush_fraction: f64,
    /// Shortest reversal, seconds; it lasts until the bending side drains.
    pub flush_min_seconds: f64,
    /// Dwell at zero drive after an excursion, seconds.
    pub rest: (f64, f64),
    /// The first excursion each way in every run goes to the pump limit.
    pub limit_first: bool,
    pub regulator: RegulatorConfig,
}

impl Default for CoveragePlan {
    fn default() -> Self {
        Self {
            runs: 5,
            run_seconds: (600.0, 700.0),
            peak: (4.0, 24.0),
            ramp_rate: [(0.05, 0.15), (0.15, 0.4)],
            ramp_start: 0.9,
            top_hold: (5.0, 20.0),
            flush_fraction: 1.0,
            flush_min_seconds: 3.0,
            rest: (10.0, 20.0),
            limit_first: true,
            regulator: RegulatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Ramp {
        since: f64,
        from: f64,
        peak: f64,
        rate: f64,
    },
    Hold {
        until: f64,
        peak: f64,
    },
    Flush {
        since: f64,
    },
    Rest {
        until: f64,
    },
}

/// Excursion sequencer for one module.
#[derive(Debug, Clone)]
struct ModuleDriver {
    module: usize,
    sign: f64,
    excursions: usize,
    phase: Phase,
}

impl ModuleDriver {
    fn new(module: usize, rng: &mut ChaCha8Rng) -> Self {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        Self {
            module,
            sign,
            excursions: 0,
            phase: Phase::Rest { until: 0.0 },
        }
    }

    fn start_excursion(
        &mut self,
        t: f64,
        plan: &CoveragePlan,
        cfg: &PlantConfig,
        rng: &mut ChaCha8Rng,
    ) {
        let peak = if plan.limit_first && self.excursions < 2 {
            cfg.p_pump - cfg.p_amb
        } else {
            rng.random_range(plan.peak.0..=plan.peak.1)
        };
        let from = (plan.ramp_start * cfg.play_width[self.module]).min(peak);
        let (lo, hi) = plan.ramp_rate[self.module];
        let rate = rng.random_range(lo..=hi);
        self.phase = Phase::Ramp {
            since: t,
            from,
            peak,
            rate,
        };
    }

    /// Signed drive at `t`, advancing the phase as conditions are met.
    fn drive(
        &mut self,
        t: f64,
        p: &PressureVector,
        plan: &CoveragePlan,
        cfg: &PlantConfig,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        loop {
            match self.phase {
                Phase::Ramp {
                    since,
                    from,
                    peak,
                    rate,
                } => {
                    let d = from + rate * (t - since);
                    if d < peak {
                        return self.sign * d;
                    }
                    let hold = rng.random_range(plan.top_hold.0..=plan.top_hold.1);
                    self.phase = Phase::Hold {
                        until: t + hold,
                        peak,
                    };
                }
                Phase::Hold { until, peak } => {
                    if t < until {
                        return self.sign * peak;
                    }
                    self.phase = Phase::Flush { since: t };
                }
                Phase::Flush { since } => {
                    let bending = actuator_index(self.module, if self.sign > 0.0 { 1 } else { 0 });
                    let drained = p[bending] - cfg.p_amb <= plan.regulator.deadband;
                    if t - since < plan.flush_min_seconds || !drained {
                        return -self.sign * plan.flush_fraction * cfg.play_width[self.module];
                    }
                    let rest = rng.random_range(plan.rest.0..=plan.rest.1);
                    self.phase = Phase::Rest { until: t + rest };
                    self.sign = -self.sign;
                    self.excursions += 1;
                }
                Phase::Rest { until } => {
                    if t < until {
                        return 0.0;
                    }
                    self.start_excursion(t, plan, cfg, rng);
                }
            }
        }
    }
}

/// Absolute targets for a drive: the side that bends the module is
/// pressurized by |d|, the antagonist vented to ambient.
fn targets_for(drive: &[f64; MODULES], p_amb: f64) -> PressureVector {
    let mut p = [p_amb; ACTUATORS];
    for (m, &d) in drive.iter().enumerate() {
        p[actuator_index(m, 0)] = p_amb + (-d).max(0.0);
        p[actuator_index(m, 1)] = p_amb + d.max(0.0);
    }
    p
}

/// Simulates the regulator following both modules' excursions and records
/// every valve change as a script event.
fn record_script(
    plan: &CoveragePlan,
    cfg: &PlantConfig,
    duration: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryScript> {
    let quiet = cfg.clone().noiseless();
    let mut state = ArmState::at_rest(&quiet);
    let mut drivers: [ModuleDriver; MODULES] = std::array::from_fn(|m| ModuleDriver::new(m, rng));
    let per_update = (1.0 / (plan.regulator.rate_hz * quiet.dt)).round().max(1.0) as u64;
    let total = (duration / quiet.dt).round() as u64;
    let mut events: Vec<ScriptEvent> = Vec::new();
    let mut u = ValveVector::CLOSED;
    for k in 0..total {
        if k % per_update == 0 {
            let t = k as f64 * quiet.dt;
            let drive: [f64; MODULES] =
                std::array::from_fn(|m| drivers[m].drive(t, &state.p, plan, &quiet, rng));
            let next = regulate(&targets_for(&drive, quiet.p_amb), &state.p, &plan.regulator);
            if events.is_empty() || next != u {
                // round to the 10 Hz grid so the file stays readable
                let t = (t / LOG_PERIOD).round() * LOG_PERIOD;
                events.push(ScriptEvent { t, u: next });
                u = next;
            }
        }
        state = step(&state, u, &quiet)?;
    }
    // closing event marks the end of the run
    events.push(ScriptEvent {
        t: ((total as f64 * quiet.dt) / LOG_PERIOD).round() * LOG_PERIOD,
        u: ValveVector::CLOSED,
    });
    TrajectoryScript::new(events)
}

/// The data-collection suite for `cfg`'s plant, deterministic in `seed`.
pub fn coverage_scripts(
    plan: &CoveragePlan,
    cfg: &PlantConfig,
    seed: u64,
) -> Result<Vec<TrajectoryScript>> {
    plan.regulator.validate()?;
    if plan.runs == 0 || plan.ramp_rate.iter().any(|r| !(r.0 > 0.0)) || !(plan.peak.0 > 0.0) {
        return Err(Error::invalid(
            "coverage plan needs runs, peaks and ramp rates above zero",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..plan.runs)
        .map(|_| {
            let duration = rng.random_range(plan.run_seconds.0..=plan.run_seconds.1);
            let duration = (duration / LOG_PERIOD).round() * LOG_PERIOD;
            record_script(plan, cfg, duration, &mut rng)
        })
        .collect()
}

/// Default suite on the default plant.
pub fn make_coverage_scripts(seed: u64) -> Result<Vec<TrajectoryScript>> {
    coverage_scripts(&CoveragePlan::default(), &PlantConfig::default(), seed)
}

/// Square grid over the two modules' pressure differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageGrid {
    /// Cell edge, kPa.
    pub cell: f64,
    /// Grid spans `[-half_span, half_span)` on both axes, kPa.
    pub half_span: f64,
}

impl Default for CoverageGrid {
    fn default() -> Self {
        Self {
            cell: 2.0,
            half_span: 20.0,
        }
    }
}

impl CoverageGrid {
    pub fn cells(&self) -> usize {
        let n = (2.0 * self.half_span / self.cell).round() as usize;
        n * n
    }

    /// Fraction of grid cells visited by any logged row.
    pub fn fraction_visited(&self, logs: &[RunLog]) -> f64 {
        let mut seen = HashSet::new();
        for row in logs.iter().flat_map(|l| &l.rows) {
            let d = [pressure_diff(&row.p, 0), pressure_diff(&row.p, 1)];
            if d.iter()
                .all(|v| (-self.half_span..self.half_span).contains(v))
            {
                seen.insert(d.map(|v| ((v + self.half_span) / self.cell).floor() as i64));
            }
        }
        seen.len() as f64 / self.cells() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_logic() {
        let rc = RegulatorConfig::default();
        let u = regulate(&[110.0, 96.0, 96.0, 96.0], &[100.0, 96.0, 96.4, 96.6], &rc);
        assert!(u.in_open(0) && !u.out_open(0));
        assert!(!u.in_open(1) && !u.out_open(1));
        assert!(!u.in_open(2) && !u.out_open(2));
        assert!(!u.in_open(3) && u.out_open(3));
    }

    #[test]
    fn deadband_edges_stay_closed() {
        let rc = RegulatorConfig::default();
        let u = regulate(&[100.5, 99.5, 100.0, 100.0], &[100.0; 4], &rc);
        assert_eq!(u, ValveVector::CLOSED);
    }

    #[test]
    fn drive_targets_vent_antagonist() {
        assert_eq!(targets_for(&[5.0, -3.0], 96.0), [96.0, 101.0, 99.0, 96.0]);
    }

    #[test]
    fn scripts_are_seeded() {
        let plan = CoveragePlan {
            runs: 2,
            run_seconds: (60.0, 90.0),
            ..CoveragePlan::default()
        };
        let cfg = PlantConfig::default();
        let a = coverage_scripts(&plan, &cfg, 4).unwrap();
        let b = coverage_scripts(&plan, &cfg, 4).unwrap();
        let c = coverage_scripts(&plan, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for s in &a {
            assert!((60.0..=90.0 + 1e-9).contains(&s.duration()));
        }
    }

    #[test]
    fn coverage_grid_counts_cells() {
        let g = CoverageGrid::default();
        assert_eq!(g.cells(), 400);
        assert_eq!(g.fraction_visited(&[]), 0.0);
    }
}
