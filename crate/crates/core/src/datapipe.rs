//! Run logs, decimation, model windows, normalization and splitting.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MarkerTuple;
use crate::plant::{PressureVector, ValveVector, PRESSURE_MAX, PRESSURE_MIN};

const SPACING_TOL: f64 = 1e-9;

/// One logged sample. JSONL field names are fixed: `t, p, u, m, theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub p: PressureVector,
    pub u: ValveVector,
    #[serde(rename = "m")]
    pub markers: Vec<MarkerTuple>,
    pub theta: Vec<f64>,
}

/// Evenly spaced samples from one collection run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub rate_hz: f64,
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn new(rows: Vec<LogRow>, rate_hz: f64) -> Result<Self> {
        let log = Self { rate_hz, rows };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) {
            return Err(Error::invalid("log rate must be positive"));
        }
        let period = 1.0 / self.rate_hz;
        for w in self.rows.windows(2) {
            if ((w[1].t - w[0].t) - period).abs() > SPACING_TOL {
                return Err(Error::Schema(format!(
                    "row spacing {} at t={} does not match {} Hz",
                    w[1].t - w[0].t,
                    w[0].t,
                    self.rate_hz
                )));
            }
        }
        if let Some(first) = self.rows.first() {
            let (nm, nt) = (first.markers.len(), first.theta.len());
            if nm == 0 || nt == 0 {
                return Err(Error::Schema("rows need markers and bend angles".into()));
            }
            if self
                .rows
                .iter()
                .any(|r| r.markers.len() != nm || r.theta.len() != nt)
            {
                return Err(Error::Schema("rows have inconsistent marker counts".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes one JSON object per row.
    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        for row in &self.rows {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    /// Reads JSONL rows; the rate is inferred from the first two timestamps.
    pub fn read_jsonl<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: LogRow = serde_json::from_str(&line)
                .map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?;
            rows.push(row);
        }
        let rate_hz = match rows.as_slice() {
            [a, b, ..] => 1.0 / (b.t - a.t),
            _ => 10.0,
        };
        if !rate_hz.is_finite() || rate_hz <= 0.0 {
            return Err(Error::Schema(
                "timestamps must be strictly increasing".into(),
            ));
        }
        // snap to the nearest 0.01 Hz so validation compares against a clean period
        let rate_hz = (rate_hz * 100.0).round() / 100.0;
        RunLog::new(rows, rate_hz)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }
}

/// Keeps every `rate_hz / model_rate`-th row starting at row 0.
pub fn decimate(log: &RunLog, model_rate: f64) -> Result<RunLog> {
    let ratio = log.rate_hz / model_rate;
    let factor = ratio.round();
    if !(model_rate > 0.0) || factor < 1.0 || (ratio - factor).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "{model_rate} Hz does not evenly divide the {} Hz log",
            log.rate_hz
        )));
    }
    let factor = factor as usize;
    Ok(RunLog {
        rate_hz: model_rate,
        rows: log.rows.iter().step_by(factor).cloned().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Back-step between history samples, in model-rate rows.
    pub tau: usize,
    /// Number of past samples in addition to the current one.
    pub n: usize,
    /// Model sample rate, Hz.
    pub model_rate: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            tau: 7,
            n: 3,
            model_rate: 2.0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || !(self.model_rate > 0.0) {
            return Err(Error::invalid(
                "tau must be >= 1 and the model rate positive",
            ));
        }
        Ok(())
    }

    /// Rows of history needed before the first sample.
    pub fn reach(&self) -> usize {
        self.tau * self.n
    }

    pub fn span_seconds(&self) -> f64 {
        self.reach() as f64 / self.model_rate
    }

    pub fn depth(&self) -> usize {
        self.n + 1
    }
}

/// Min-max bounds mapping each channel onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub p_min: f64,
    pub p_max: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            p_min: PRESSURE_MIN,
            p_max: PRESSURE_MAX,
            x_min: -0.15,
            x_max: 0.15,
            y_min: 0.0,
            y_max: 0.40,
        }
    }
}

fn to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn from_unit(v: f64, lo: f64, hi: f64) -> f64 {
    lo + v * (hi - lo)
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p_min < self.p_max && self.x_min < self.x_max && self.y_min < self.y_max {
            Ok(())
        } else {
            Err(Error::Schema("normalization bounds need min < max".into()))
        }
    }

    pub fn pressure(&self, p: f64) -> f64 {
        to_unit(p, self.p_min, self.p_max)
    }

    pub fn pressure_inv(&self, v: f64) -> f64 {
        from_unit(v, self.p_min, self.p_max)
    }

    pub fn x(&self, x: f64) -> f64 {
        to_unit(x, self.x_min, self.x_max)
    }

    pub fn x_inv(&self, v: f64) -> f64 {
        from_unit(v, self.x_min, self.x_max)
    }

    pub fn y(&self, y: f64) -> f64 {
        to_unit(y, self.y_min, self.y_max)
    }

    pub fn y_inv(&self, v: f64) -> f64 {
        from_unit(v, self.y_min, self.y_max)
    }

    /// Interleaved `[x1, y1, x2, y2, ...]` in normalized units.
    pub fn markers(&self, markers: &[MarkerTuple]) -> Vec<f64> {
        markers
            .iter()
            .flat_map(|m| [self.x(m.x), self.y(m.y)])
            .collect()
    }

    pub fn markers_from_xy(&self, xy: &[(f64, f64)]) -> Vec<f64> {
        xy.iter()
            .flat_map(|&(x, y)| [self.x(x), self.y(y)])
            .collect()
    }

    /// Inverse of [`Self::markers`]; positions only.
    pub fn markers_inv(&self, v: &[f64]) -> Vec<(f64, f64)> {
        v.chunks_exact(2)
            .map(|c| (self.x_inv(c[0]), self.y_inv(c[1])))
            .collect()
    }

    pub fn pressures(&self, p: &[f64]) -> Vec<f64> {
        p.iter().map(|&v| self.pressure(v)).collect()
    }

    pub fn pressures_inv(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&u| self.pressure_inv(u)).collect()
    }
}

/// One normalized training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Forward-model input: pressures of every history step, then valve bits of
/// every history step, newest first.
pub fn fk_input(history: &[(PressureVector, ValveVector)], norm: &NormalizationSpec) -> Vec<f64> {
    let mut input = Vec::with_capacity(history.len() * 12);
    for (p, _) in history {
        input.extend(p.iter().map(|&v| norm.pressure(v)));
    }
    for (_, u) in history {
        input.extend(u.bits());
    }
    input
}

/// Forward-model rows: history `[t, t - tau, ..., t - n*tau]` -> markers at `t`.
pub fn build_fk_windows(
    log: &RunLog,
    wc: &WindowConfig,
    norm: &NormalizationSpec,
) -> Result<Vec<WindowedSample>> {
    wc.validate()?;
    let reach = wc.reach();
    if log.rows.len() <= reach {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(log.rows.len() - reach);
    let mut history = Vec::with_capacity(wc.depth());
    for t in reach..log.rows.len() {
        history.clear();
        history.extend((0..wc.depth()).map(|r| {
            let row = &log.rows[t - r * wc.tau];
            (row.p, row.u)
        }));
        out.push(WindowedSample {
            input: fk_input(&history, norm),
            target: norm.markers(&log.rows[t].markers),
        });
    }
    Ok(out)
}

/// Inverse-model rows: markers at `t` -> pressures at `t`.
pub fn build_ik_samples(log: &RunLog, norm: &NormalizationSpec) -> Result<Vec<WindowedSample>> {
    if log.is_empty() {
        return Err(Error::Empty("run log"));
    }
    Ok(log
        .rows
        .iter()
        .map(|row| WindowedSample {
            input: norm.markers(&row.markers),
            target: norm.pressures(&row.p),
        })
        .collect())
}

/// Seeded shuffle of `0..n`; the first `ceil(ratio * n)` indices train.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Empty("sample list"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("split ratio must be in (0, 1)"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // the epsilon keeps exact products such as 0.8 * 10 from rounding up
    let n_train = ((ratio * n as f64 - 1e-9).ceil() as usize).min(n);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

pub fn split<T: Clone>(samples: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (tr, te) = split_indices(samples.len(), ratio, seed)?;
    Ok((
        tr.iter().map(|&i| samples[i].clone()).collect(),
        te.iter().map(|&i| samples[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ArmGeometry;

    fn row(t: f64, p: f64, theta: [f64; 2]) -> LogRow {
        LogRow {
            t,
            p: [p; 4],
            u: ValveVector::CLOSED,
            markers: ArmGeometry::default().marker_positions(&theta).unwrap(),
            theta: theta.to_vec(),
        }
    }

    fn log(n: usize, rate: f64) -> RunLog {
        RunLog::new(
            (0..n)
                .map(|k| row(k as f64 / rate, 96.0, [0.0, 0.0]))
                .collect(),
            rate,
        )
        .unwrap()
    }

    #[test]
    fn decimation_counts() {
        let l = decimate(&log(100, 10.0), 2.0).unwrap();
        assert_eq!(l.rows.len(), 20);
        for (k, r) in l.rows.iter().enumerate() {
            assert!((r.t - 0.5 * k as f64).abs() < 1e-9);
        }
        assert_eq!(decimate(&l, 2.0).unwrap(), l);
        assert!(decimate(&log(10, 10.0), 3.0).is_err());
    }

    #[test]
    fn fk_window_indices() {
        let mut l = log(22, 2.0);
        for (k, r) in l.rows.iter_mut().enumerate() {
            r.p = [95.0 + k as f64; 4];
        }
        let w =
            build_fk_windows(&l, &WindowConfig::default(), &NormalizationSpec::default()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].input.len(), 48);
        assert_eq!(w[0].target.len(), 20);
        let norm = NormalizationSpec::default();
        for (slot, src) in [21usize, 14, 7, 0].iter().enumerate() {
            assert_eq!(w[0].input[4 * slot], norm.pressure(95.0 + *src as f64));
        }
        assert!(
            build_fk_windows(&log(21, 2.0), &WindowConfig::default(), &norm)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn midpoint_pressure_normalizes_to_half() {
        let mut l = log(30, 2.0);
        for r in &mut l.rows {
            r.p = [108.0; 4];
        }
        let w =
            build_fk_windows(&l, &WindowConfig::default(), &NormalizationSpec::default()).unwrap();
        assert!(w.iter().all(|s| s.input[..16].iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn corner_marker_normalization() {
        let n = NormalizationSpec::default();
        assert_eq!((n.x(-0.15), n.y(0.40)), (0.0, 1.0));
        assert_eq!((n.x(-0.2), n.y(0.5)), (0.0, 1.0));
    }

    #[test]
    fn ik_rows_for_straight_arm() {
        let l = log(7, 2.0);
        let s = build_ik_samples(&l, &NormalizationSpec::default()).unwrap();
        assert_eq!(s.len(), 7);
        for (k, v) in s[0].input.chunks(2).enumerate() {
            assert!((v[0] - 0.5).abs() < 1e-12);
            assert!((v[1] - 0.1 * (k + 1) as f64).abs() < 1e-12);
        }
        for &t in &s[0].target {
            assert!((t - (96.0 - 95.0) / 26.0).abs() < 1e-15);
        }
        assert!(build_ik_samples(&log(0, 2.0), &NormalizationSpec::default()).is_err());
    }

    #[test]
    fn reference_split_sizes() {
        let (tr, te) = split_indices(5886, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (4709, 1177));
        let (tr, te) = split_indices(10, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert!(split_indices(0, 0.8, 1).is_err());
        assert!(split_indices(5, 1.0, 1).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let v: Vec<u32> = (0..100).collect();
        assert_eq!(split(&v, 0.8, 4).unwrap(), split(&v, 0.8, 4).unwrap());
        assert_ne!(split(&v, 0.8, 4).unwrap(), split(&v, 0.8, 5).unwrap());
    }

    #[test]
    fn jsonl_round_trip() {
        let l = log(5, 10.0);
        let mut buf = Vec::new();
        l.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first = text.lines().next().unwrap();
        assert!(
            first.starts_with(r#"{"t":0.0,"p":[96.0,96.0,96.0,96.0],"u":[0,0,0,0,0,0,0,0],"m":[["#)
        );
        assert_eq!(RunLog::read_jsonl(buf.as_slice()).unwrap(), l);
    }

    #[test]
    fn jsonl_rejects_bad_rows() {
        assert!(RunLog::read_jsonl(&b"{\"t\":0.0}\n"[..]).is_err());
        let l = log(3, 10.0);
        let mut buf = Vec::new();
        l.write_jsonl(&mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        let first = text.lines().next().unwrap().to_owned();
        text.push_str(&first);
        assert!(RunLog::read_jsonl(text.as_bytes()).is_err());
    }
}
