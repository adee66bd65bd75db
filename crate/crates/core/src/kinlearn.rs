//! Forward/inverse kinematics models: assembly, training, inference and
//! RMSE reporting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{fk_input, NormalizationSpec, WindowConfig, WindowedSample};
use crate::error::{Error, Result};
use crate::nnet::{mlp, AdamState, Checkpoint, LayerSpec, Matrix, Mode, Network};
use crate::plant::{PressureVector, ValveVector, ACTUATORS, PRESSURE_MAX, PRESSURE_MIN, VALVES};

pub const HIDDEN_LAYERS: [usize; 4] = [128, 64, 32, 16];
pub const HIDDEN_DROPOUT: f64 = 0.2;
pub const MARKERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fk,
    Ik,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Fk => "fk",
            ModelKind::Ik => "ik",
        }
    }

    pub fn input_dim(self, window: &WindowConfig) -> usize {
        match self {
            ModelKind::Fk => window.depth() * (ACTUATORS + VALVES),
            ModelKind::Ik => 2 * MARKERS,
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            ModelKind::Fk => 2 * MARKERS,
            ModelKind::Ik => ACTUATORS,
        }
    }

    /// Default architecture: four relu hidden layers with dropout.
    pub fn layers(self, window: &WindowConfig) -> Vec<LayerSpec> {
        self.layers_with_dropout(window, HIDDEN_DROPOUT)
    }

    pub fn layers_with_dropout(self, window: &WindowConfig, dropout: f64) -> Vec<LayerSpec> {
        let mut sizes = vec![self.input_dim(window)];
        sizes.extend(HIDDEN_LAYERS);
        sizes.push(self.output_dim());
        mlp(&sizes, dropout)
    }

    fn threshold(self) -> f64 {
        match self {
            ModelKind::Fk => 5.0,
            ModelKind::Ik => 1.5,
        }
    }

    fn unit(self) -> &'static str {
        match self {
            ModelKind::Fk => "mm",
            ModelKind::Ik => "kPa",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fk" => Ok(ModelKind::Fk),
            "ik" => Ok(ModelKind::Ik),
            other => Err(Error::invalid(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run, stepped per epoch.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Train fraction used by callers that split before training.
    pub split: f64,
    pub seed: u64,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Dropout after every hidden layer.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            split: 0.8,
            seed: 0,
            lr: 1e-3,
            schedule: LrSchedule::Cosine,
            dropout: HIDDEN_DROPOUT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = epoch as f64 / self.epochs as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Trains a fresh default-architecture network on normalized samples.
///
/// `window` is recorded in forward-model checkpoints so inference can check
/// the history length.
pub fn train(
    kind: ModelKind,
    samples: &[WindowedSample],
    tc: &TrainConfig,
    norm: &NormalizationSpec,
    window: &WindowConfig,
) -> Result<Checkpoint> {
    tc.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let layers = kind.layers_with_dropout(window, tc.dropout);
    let (din, dout) = (kind.input_dim(window), kind.output_dim());
    for s in samples {
        if s.input.len() != din || s.target.len() != dout {
            return Err(Error::Dimension {
                what: "training sample",
                expected: din + dout,
                got: s.input.len() + s.target.len(),
            });
        }
    }

    let mut net = Network::new(layers, tc.seed)?;
    let mut adam = AdamState::with_lr(net.param_count(), tc.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    dropout_rng.set_stream(2);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut xb = Vec::with_capacity(tc.batch_size * din);
    let mut yb = Vec::with_capacity(tc.batch_size * dout);
    for epoch in 0..tc.epochs {
        adam.lr = tc.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(&samples[i].input);
                yb.extend_from_slice(&samples[i].target);
            }
            let x = Matrix::new(chunk.len(), din, std::mem::take(&mut xb))?;
            let y = Matrix::new(chunk.len(), dout, std::mem::take(&mut yb))?;
            let cache = net.forward(&x, Mode::Train, &mut dropout_rng)?;
            let (loss, grads) = net.backward(&cache, &y)?;
            net.apply_adam(&mut adam, &grads)?;
            total += loss * chunk.len() as f64;
            xb = x.data;
            yb = y.data;
        }
        let mean = total / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        history.push(mean);
    }
    adam.lr = tc.lr;

    let mut ckpt = Checkpoint::from_network(&net, Some(&adam), *norm);
    ckpt.kind = Some(kind.as_str().to_string());
    ckpt.window = (kind == ModelKind::Fk).then_some(*window);
    ckpt.loss_history = history;
    Ok(ckpt)
}

/// A checkpoint ready for inference.
#[derive(Debug, Clone)]
pub struct KinematicModel {
    kind: ModelKind,
    net: Network,
    norm: NormalizationSpec,
    window: Option<WindowConfig>,
}

impl KinematicModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind: ModelKind = ckpt
            .kind
            .as_deref()
            .ok_or_else(|| Error::Schema("checkpoint has no model kind".into()))?
            .parse()?;
        let net = ckpt.network()?;
        let window = match kind {
            ModelKind::Fk => Some(
                ckpt.window
                    .ok_or_else(|| Error::Schema("forward model without window".into()))?,
            ),
            ModelKind::Ik => None,
        };
        let expected_in = match &window {
            Some(w) => kind.input_dim(w),
            None => kind.input_dim(&WindowConfig::default()),
        };
        if net.input_dim() != expected_in || net.output_dim() != kind.output_dim() {
            return Err(Error::Schema(format!(
                "{kind} network is {}->{}, expected {expected_in}->{}",
                net.input_dim(),
                net.output_dim(),
                kind.output_dim()
            )));
        }
        Ok(Self {
            kind,
            net,
            norm: ckpt.norm,
            window,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn norm(&self) -> &NormalizationSpec {
        &self.norm
    }

    pub fn window(&self) -> Option<&WindowConfig> {
        self.window.as_ref()
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::KindMismatch {
                expected: kind.as_str().to_string(),
                found: self.kind.as_str().to_string(),
            });
        }
        Ok(())
    }

    /// Marker positions (m) from the actuation history `[t, t - tau, ...]`.
    pub fn predict_fk(&self, history: &[(PressureVector, ValveVector)]) -> Result<Vec<(f64, f64)>> {
        self.expect(ModelKind::Fk)?;
        let depth = self.window.as_ref().map_or(0, WindowConfig::depth);
        if history.len() != depth {
            return Err(Error::Dimension {
                what: "actuation history",
                expected: depth,
                got: history.len(),
            });
        }
        let out = self.net.predict(&fk_input(history, &self.norm))?;
        Ok(self.norm.markers_inv(&clamp_unit(out)))
    }

    /// Actuator pressures (kPa) expected to hold the given marker positions.
    pub fn predict_ik(&self, markers: &[(f64, f64)]) -> Result<PressureVector> {
        self.expect(ModelKind::Ik)?;
        if markers.len() != MARKERS {
            return Err(Error::Dimension {
                what: "target markers",
                expected: MARKERS,
                got: markers.len(),
            });
        }
        if markers
            .iter()
            .any(|(x, y)| !x.is_finite() || !y.is_finite())
        {
            return Err(Error::NonFinite("target markers"));
        }
        let out = self.net.predict(&self.norm.markers_from_xy(markers))?;
        let p = self.norm.pressures_inv(&out);
        Ok(std::array::from_fn(|a| {
            p[a].clamp(PRESSURE_MIN, PRESSURE_MAX)
        }))
    }

    /// Denormalized prediction for one normalized input row.
    fn predict_physical(&self, input: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.predict(input)?;
        Ok(match self.kind {
            ModelKind::Fk => self
                .norm
                .markers_inv(&clamp_unit(out))
                .into_iter()
                .flat_map(|(x, y)| [x, y])
                .collect(),
            ModelKind::Ik => self
                .norm
                .pressures_inv(&out)
                .into_iter()
                .map(|p| p.clamp(PRESSURE_MIN, PRESSURE_MAX))
                .collect(),
        })
    }

    fn target_physical(&self, target: &[f64]) -> Vec<f64> {
        match self.kind {
            ModelKind::Fk => self
                .norm
                .markers_inv(target)
                .into_iter()
                .flat_map(|(x, y)| [x, y])
                .collect(),
            ModelKind::Ik => self.norm.pressures_inv(target),
        }
    }
}

fn clamp_unit(mut v: Vec<f64>) -> Vec<f64> {
    for x in &mut v {
        *x = x.clamp(0.0, 1.0);
    }
    v
}

/// Per-sample RMSE in physical units: millimeters per marker for forward
/// models, kPa per actuator for inverse models.
pub fn sample_rmse(kind: ModelKind, predicted: &[f64], actual: &[f64]) -> f64 {
    match kind {
        ModelKind::Fk => {
            let sq: f64 = predicted
                .chunks_exact(2)
                .zip(actual.chunks_exact(2))
                .map(|(p, a)| (p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2))
                .sum();
            1e3 * (sq / (predicted.len() / 2) as f64).sqrt()
        }
        ModelKind::Ik => {
            let sq: f64 = predicted
                .iter()
                .zip(actual)
                .map(|(p, a)| (p - a).powi(2))
                .sum();
            (sq / predicted.len() as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Values at or beyond the last edge.
    pub overflow: usize,
}

impl Histogram {
    pub fn fixed(width: f64, upper: f64, values: &[f64]) -> Self {
        let bins = (upper / width).round() as usize;
        let edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
        let mut counts = vec![0; bins];
        let mut overflow = 0;
        for &v in values {
            let i = (v / width).floor();
            if i >= bins as f64 || !i.is_finite() {
                overflow += 1;
            } else {
                counts[i.max(0.0) as usize] += 1;
            }
        }
        Self {
            edges,
            counts,
            overflow,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.overflow
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s.push_str(&format!(
            "{},inf,{}\n",
            self.edges[self.counts.len()],
            self.overflow
        ));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: ModelKind,
    pub samples: usize,
    pub unit: String,
    pub formula: String,
    pub median: f64,
    pub mean: f64,
    pub threshold: f64,
    pub fraction_below: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: Vec<f64>,
    pub histogram: Histogram,
    pub summary: Summary,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl EvalReport {
    pub fn from_rmse(kind: ModelKind, rmse: Vec<f64>) -> Result<Self> {
        if rmse.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let histogram = match kind {
            ModelKind::Fk => Histogram::fixed(1.0, 20.0, &rmse),
            ModelKind::Ik => Histogram::fixed(0.25, 5.0, &rmse),
        };
        let threshold = kind.threshold();
        let n = rmse.len() as f64;
        let formula = match kind {
            ModelKind::Fk => "sqrt(mean_j(|m_hat_j - m_j|^2)) over 10 markers, mm",
            ModelKind::Ik => "sqrt(mean_a((P_hat_a - P_a)^2)) over 4 actuators, kPa",
        };
        let summary = Summary {
            kind,
            samples: rmse.len(),
            unit: kind.unit().to_string(),
            formula: formula.to_string(),
            median: median(&rmse),
            mean: rmse.iter().sum::<f64>() / n,
            threshold,
            fraction_below: rmse.iter().filter(|&&r| r < threshold).count() as f64 / n,
        };
        Ok(Self {
            rmse,
            histogram,
            summary,
        })
    }

    /// Writes `histogram.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("histogram.csv"), self.histogram.to_csv())?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&self.summary)? + "\n",
        )?;
        Ok(())
    }
}

/// RMSE report over normalized test samples, computed after denormalization.
pub fn evaluate(model: &KinematicModel, test: &[WindowedSample]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let rmse = test
        .iter()
        .map(|s| {
            let pred = model.predict_physical(&s.input)?;
            Ok(sample_rmse(
                model.kind,
                &pred,
                &model.target_physical(&s.target),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rmse(model.kind, rmse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architectures() {
        let w = WindowConfig::default();
        let fk = Network::new(ModelKind::Fk.layers(&w), 0).unwrap();
        let ik = Network::new(ModelKind::Ik.layers(&w), 0).unwrap();
        assert_eq!((fk.input_dim(), fk.output_dim()), (48, 20));
        assert_eq!(fk.param_count(), 17_476);
        assert_eq!(ik.param_count(), 13_620);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("fk".parse::<ModelKind>().unwrap(), ModelKind::Fk);
        assert!("FK".parse::<ModelKind>().is_err());
        assert_eq!(serde_json::to_string(&ModelKind::Ik).unwrap(), "\"ik\"");
    }

    #[test]
    fn uniform_offset_rmse() {
        let actual: Vec<f64> = (0..20).map(|i| 0.01 * i as f64).collect();
        let shifted: Vec<f64> = actual
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v + 1e-3 } else { *v })
            .collect();
        assert!((sample_rmse(ModelKind::Fk, &shifted, &actual) - 1.0).abs() < 1e-9);
        assert_eq!(sample_rmse(ModelKind::Ik, &[100.0; 4], &[100.0; 4]), 0.0);
        assert_eq!(
            sample_rmse(ModelKind::Ik, &[101.0, 99.0, 101.0, 99.0], &[100.0; 4]),
            1.0
        );
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::fixed(1.0, 20.0, &[0.0, 0.5, 1.0, 19.99, 20.0, 55.0]);
        assert_eq!(h.counts.len(), 20);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[19], 1);
        assert_eq!(h.overflow, 2);
        assert_eq!(h.total(), 6);
        let csv = h.to_csv();
        assert!(csv.starts_with("bin_left,bin_right,count\n0,1,2\n"));
        assert!(csv.ends_with("20,inf,2\n"));
        let ik = Histogram::fixed(0.25, 5.0, &[1.49]);
        assert_eq!(ik.counts.len(), 20);
        assert_eq!(ik.counts[5], 1);
    }

    #[test]
    fn perfect_predictor_report() {
        let r = EvalReport::from_rmse(ModelKind::Fk, vec![0.0; 7]).unwrap();
        assert_eq!(r.histogram.counts[0], 7);
        assert_eq!(r.summary.fraction_below, 1.0);
        assert!(EvalReport::from_rmse(ModelKind::Ik, vec![]).is_err());
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn cosine_schedule_ends_near_zero() {
        let tc = TrainConfig::default();
        assert_eq!(tc.lr_at(0), 1e-3);
        assert!(tc.lr_at(99) < 1e-6);
        let c = TrainConfig {
            schedule: LrSchedule::Constant,
            ..tc
        };
        assert_eq!(c.lr_at(99), 1e-3);
    }

    #[test]
    fn train_rejects_bad_input() {
        let w = WindowConfig::default();
        let norm = NormalizationSpec::default();
        let tc = TrainConfig::default();
        assert!(train(ModelKind::Ik, &[], &tc, &norm, &w).is_err());
        let bad = WindowedSample {
            input: vec![0.0; 19],
            target: vec![0.0; 4],
        };
        assert!(train(ModelKind::Ik, &[bad], &tc, &norm, &w).is_err());
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let w = WindowConfig::default();
        let s = WindowedSample {
            input: vec![0.5; 20],
            target: vec![0.5; 4],
        };
        let tc = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let ck = train(ModelKind::Ik, &[s], &tc, &NormalizationSpec::default(), &w).unwrap();
        let m = KinematicModel::from_checkpoint(&ck).unwrap();
        let err = m.predict_fk(&[]).unwrap_err();
        assert!(err.to_string().contains("fk"), "{err}");
        let p = m.predict_ik(&[(0.0, 0.1); 10]).unwrap();
        assert!(p.iter().all(|v| (PRESSURE_MIN..=PRESSURE_MAX).contains(v)));
        assert!(m.predict_ik(&[(0.0, 0.1); 9]).is_err());
    }
}
