//! Dense feed-forward networks trained with batch-mean MSE and adam.
//!
//! Parameters live in one flat buffer, layer by layer: the row-major
//! `out x in` weight matrix followed by the `out` biases. Gradients and the
//! adam moments share that layout.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{NormalizationSpec, WindowConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Drop probability applied to this layer's output during training.
    pub dropout: f64,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        (self.in_dim + 1) * self.out_dim
    }
}

/// Builds `sizes[0] -> sizes[1] -> ... -> sizes[n]` with relu + dropout on
/// every hidden layer and a linear output.
pub fn mlp(sizes: &[usize], hidden_dropout: f64) -> Vec<LayerSpec> {
    let last = sizes.len().saturating_sub(2);
    sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec {
            in_dim: w[0],
            out_dim: w[1],
            activation: if i == last {
                Activation::Linear
            } else {
                Activation::Relu
            },
            dropout: if i == last { 0.0 } else { hidden_dropout },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Row-major `rows x cols` block of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                what: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    what: "matrix row",
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
    seed: u64,
    /// Bumped on every parameter change; stamps forward caches.
    version: u64,
}

/// Activations retained from a forward pass for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    batch: usize,
    /// Input to each layer (post-dropout output of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// Per-unit dropout scale (0 or 1/(1-p)) for each layer, when applied.
    masks: Vec<Option<Vec<f64>>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradient buffer in the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

fn check_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::invalid("network needs at least one layer"));
    }
    for l in layers {
        if l.in_dim == 0 || l.out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be at least 1"));
        }
        if !(0.0..1.0).contains(&l.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
    }
    for w in layers.windows(2) {
        if w[0].out_dim != w[1].in_dim {
            return Err(Error::Dimension {
                what: "layer chain",
                expected: w[0].out_dim,
                got: w[1].in_dim,
            });
        }
    }
    Ok(())
}

impl Network {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        check_layers(&layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.iter().map(LayerSpec::param_count).sum());
        for l in &layers {
            let limit = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            params.extend((0..l.in_dim * l.out_dim).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, l.out_dim));
        }
        Ok(Self {
            layers,
            params,
            seed,
            version: 0,
        })
    }

    pub fn from_params(layers: Vec<LayerSpec>, params: Vec<f64>, seed: u64) -> Result<Self> {
        check_layers(&layers)?;
        let expected: usize = layers.iter().map(LayerSpec::param_count).sum();
        if params.len() != expected {
            return Err(Error::Dimension {
                what: "parameters",
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            layers,
            params,
            seed,
            version: 0,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    fn offset(&self, layer: usize) -> usize {
        self.layers[..layer]
            .iter()
            .map(LayerSpec::param_count)
            .sum()
    }

    /// `(weights, biases)` of one layer.
    pub fn layer_params(&self, layer: usize) -> (&[f64], &[f64]) {
        let l = &self.layers[layer];
        let off = self.offset(layer);
        let nw = l.in_dim * l.out_dim;
        (
            &self.params[off..off + nw],
            &self.params[off + nw..off + nw + l.out_dim],
        )
    }

    pub fn forward<R: Rng>(&self, input: &Matrix, mode: Mode, rng: &mut R) -> Result<ForwardCache> {
        if input.cols != self.input_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim(),
                got: input.cols,
            });
        }
        let batch = input.rows;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut x = input.data.clone();
        let mut off = 0;
        for l in &self.layers {
            let nw = l.in_dim * l.out_dim;
            let w = &self.params[off..off + nw];
            let b = &self.params[off + nw..off + nw + l.out_dim];
            off += nw + l.out_dim;

            let mut z = vec![0.0; batch * l.out_dim];
            for (xb, zb) in x.chunks_exact(l.in_dim).zip(z.chunks_exact_mut(l.out_dim)) {
                for (o, zo) in zb.iter_mut().enumerate() {
                    *zo = b[o] + dot(&w[o * l.in_dim..(o + 1) * l.in_dim], xb);
                }
            }
            let mut a: Vec<f64> = match l.activation {
                Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
                Activation::Linear => z.clone(),
            };
            let mask = if mode == Mode::Train && l.dropout > 0.0 {
                let keep_scale = 1.0 / (1.0 - l.dropout);
                let m: Vec<f64> = (0..a.len())
                    .map(|_| {
                        if rng.random::<f64>() < l.dropout {
                            0.0
                        } else {
                            keep_scale
                        }
                    })
                    .collect();
                for (ai, mi) in a.iter_mut().zip(&m) {
                    *ai *= mi;
                }
                Some(m)
            } else {
                None
            };
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
            masks.push(mask);
        }
        Ok(ForwardCache {
            version: self.version,
            batch,
            inputs,
            pre,
            masks,
            output: x,
        })
    }

    /// Eval-mode forward of a single sample.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::new(1, input.len(), input.to_vec())?;
        // eval mode never draws from the rng
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(&m, Mode::Eval, &mut unused)?.output)
    }

    /// Batch-mean MSE over all outputs: `sum((y - t)^2) / (batch * out_dim)`.
    pub fn loss(&self, cache: &ForwardCache, target: &Matrix) -> Result<f64> {
        self.check_target(cache, target)?;
        let n = cache.output.len() as f64;
        Ok(cache
            .output
            .iter()
            .zip(&target.data)
            .map(|(y, t)| (y - t) * (y - t))
            .sum::<f64>()
            / n)
    }

    fn check_target(&self, cache: &ForwardCache, target: &Matrix) -> Result<()> {
        if target.cols != self.output_dim() || target.rows != cache.batch {
            return Err(Error::Dimension {
                what: "target",
                expected: cache.batch * self.output_dim(),
                got: target.data.len(),
            });
        }
        Ok(())
    }

    /// Exact gradients of the batch-mean MSE for the pass in `cache`.
    pub fn backward(&self, cache: &ForwardCache, target: &Matrix) -> Result<(f64, Gradients)> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        self.check_target(cache, target)?;
        let batch = cache.batch;
        let scale = 2.0 / cache.output.len() as f64;
        let mut loss = 0.0;
        let mut delta: Vec<f64> = cache
            .output
            .iter()
            .zip(&target.data)
            .map(|(y, t)| {
                loss += (y - t) * (y - t);
                scale * (y - t)
            })
            .collect();
        loss /= cache.output.len() as f64;

        let mut grads = vec![0.0; self.params.len()];
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            // back through this layer's dropout and activation
            if let Some(mask) = &cache.masks[li] {
                for (d, m) in delta.iter_mut().zip(mask) {
                    *d *= m;
                }
            }
            if l.activation == Activation::Relu {
                for (d, z) in delta.iter_mut().zip(&cache.pre[li]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }

            let off = self.offset(li);
            let nw = l.in_dim * l.out_dim;
            let x = &cache.inputs[li];
            {
                let (gw, gb) = grads[off..off + nw + l.out_dim].split_at_mut(nw);
                for (xb, db) in x.chunks_exact(l.in_dim).zip(delta.chunks_exact(l.out_dim)) {
                    for (o, &d) in db.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, xb, &mut gw[o * l.in_dim..(o + 1) * l.in_dim]);
                        }
                        gb[o] += d;
                    }
                }
            }
            if li > 0 {
                let w = &self.params[off..off + nw];
                let mut prev = vec![0.0; batch * l.in_dim];
                for (pb, db) in prev
                    .chunks_exact_mut(l.in_dim)
                    .zip(delta.chunks_exact(l.out_dim))
                {
                    for (o, &d) in db.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, &w[o * l.in_dim..(o + 1) * l.in_dim], pb);
                        }
                    }
                }
                delta = prev;
            }
        }
        Ok((loss, Gradients(grads)))
    }

    pub fn apply_adam(&mut self, adam: &mut AdamState, grads: &Gradients) -> Result<()> {
        adam.step(&mut self.params, &grads.0)?;
        self.version += 1;
        Ok(())
    }
}

/// Relative disagreement `|g - g_fd| / max(|g|, |g_fd|)` between backprop
/// and central differences of the eval-mode loss (no dropout), in the
/// Euclidean norm over all parameters.
pub fn gradient_check(net: &Network, input: &Matrix, target: &Matrix, h: f64) -> Result<f64> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let cache = net.forward(input, Mode::Eval, &mut unused)?;
    let (_, analytic) = net.backward(&cache, target)?;
    let mut probe = net.clone();
    let mut diff = 0.0;
    let mut norm_a = 0.0;
    let mut norm_n = 0.0;
    for i in 0..net.param_count() {
        let base = probe.params[i];
        probe.params[i] = base + h;
        let up = probe.loss(&probe.forward(input, Mode::Eval, &mut unused)?, target)?;
        probe.params[i] = base - h;
        let down = probe.loss(&probe.forward(input, Mode::Eval, &mut unused)?, target)?;
        probe.params[i] = base;
        let numeric = (up - down) / (2.0 * h);
        diff += (analytic.0[i] - numeric).powi(2);
        norm_a += analytic.0[i].powi(2);
        norm_n += numeric * numeric;
    }
    let scale = norm_a.sqrt().max(norm_n.sqrt());
    Ok(if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    })
}

/// Bias-corrected adam with per-parameter moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self::with_lr(n_params, 1e-3)
    }

    pub fn with_lr(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                what: "adam parameters",
                expected: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Serialized network with its data normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// `"fk"`, `"ik"`, or absent for a bare network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    pub layers: Vec<LayerSpec>,
    /// Row-major `out x in` weight matrix per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub norm: NormalizationSpec,
    pub seed: u64,
    pub param_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowConfig>,
    /// Mean training loss per epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, adam: Option<&AdamState>, norm: NormalizationSpec) -> Self {
        let (weights, biases) = (0..net.layers.len())
            .map(|i| {
                let (w, b) = net.layer_params(i);
                (w.to_vec(), b.to_vec())
            })
            .unzip();
        Self {
            kind: None,
            layers: net.layers.clone(),
            weights,
            biases,
            norm,
            seed: net.seed,
            param_count: net.param_count(),
            window: None,
            loss_history: Vec::new(),
            adam: adam.cloned(),
        }
    }

    pub fn network(&self) -> Result<Network> {
        check_layers(&self.layers)?;
        if self.weights.len() != self.layers.len() || self.biases.len() != self.layers.len() {
            return Err(Error::Schema(
                "one weight matrix and bias vector per layer".into(),
            ));
        }
        let mut params = Vec::with_capacity(self.param_count);
        for ((l, w), b) in self.layers.iter().zip(&self.weights).zip(&self.biases) {
            if w.len() != l.in_dim * l.out_dim || b.len() != l.out_dim {
                return Err(Error::Dimension {
                    what: "checkpoint layer",
                    expected: l.param_count(),
                    got: w.len() + b.len(),
                });
            }
            params.extend_from_slice(w);
            params.extend_from_slice(b);
        }
        if params.len() != self.param_count {
            return Err(Error::Schema(format!(
                "stored param_count {} disagrees with layers ({})",
                self.param_count,
                params.len()
            )));
        }
        if let Some(adam) = &self.adam {
            if adam.m.len() != params.len() || adam.v.len() != params.len() {
                return Err(Error::Schema("adam moments do not match parameters".into()));
            }
        }
        Network::from_params(self.layers.clone(), params, self.seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
        ckpt.norm.validate()?;
        ckpt.network()?;
        Ok(ckpt)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn reference_parameter_counts() {
        let fk = Network::new(mlp(&[48, 128, 64, 32, 16, 20], 0.2), 0).unwrap();
        let ik = Network::new(mlp(&[20, 128, 64, 32, 16, 4], 0.2), 0).unwrap();
        assert_eq!(fk.param_count(), 17_476);
        assert_eq!(ik.param_count(), 13_620);
        assert_eq!(Network::new(mlp(&[2, 3], 0.0), 0).unwrap().param_count(), 9);
    }

    #[test]
    fn mlp_layer_roles() {
        let l = mlp(&[4, 8, 2], 0.2);
        assert_eq!(l[0].activation, Activation::Relu);
        assert_eq!(l[0].dropout, 0.2);
        assert_eq!(l[1].activation, Activation::Linear);
        assert_eq!(l[1].dropout, 0.0);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let layers = mlp(&[3, 5, 2], 0.0);
        let n = Network::from_params(layers.clone(), vec![0.0; 32], 0).unwrap();
        assert_eq!(n.predict(&[1.0, -2.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn relu_clamps() {
        let layers = vec![LayerSpec {
            in_dim: 1,
            out_dim: 1,
            activation: Activation::Relu,
            dropout: 0.0,
        }];
        let n = Network::from_params(layers, vec![-1.0, 0.0], 0).unwrap();
        assert_eq!(n.predict(&[2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let n = Network::new(mlp(&[3, 2], 0.0), 0).unwrap();
        assert!(n.predict(&[1.0]).is_err());
        assert!(Network::new(
            vec![
                LayerSpec {
                    in_dim: 2,
                    out_dim: 3,
                    activation: Activation::Relu,
                    dropout: 0.0
                },
                LayerSpec {
                    in_dim: 4,
                    out_dim: 1,
                    activation: Activation::Linear,
                    dropout: 0.0
                },
            ],
            0
        )
        .is_err());
    }

    #[test]
    fn seeded_dropout_repeats() {
        let n = Network::new(mlp(&[4, 16, 16, 2], 0.2), 3).unwrap();
        let x = Matrix::new(2, 4, vec![0.1, 0.2, 0.3, 0.4, 1.0, 0.0, -1.0, 0.5]).unwrap();
        let a = n.forward(&x, Mode::Train, &mut rng()).unwrap();
        let b = n.forward(&x, Mode::Train, &mut rng()).unwrap();
        assert_eq!(a.output(), b.output());
        let e = n.forward(&x, Mode::Eval, &mut rng()).unwrap();
        assert_ne!(a.output(), e.output());
    }

    #[test]
    fn linear_hand_gradient() {
        let layers = mlp(&[1, 1], 0.0);
        let n = Network::from_params(layers, vec![2.0, 0.0], 0).unwrap();
        let x = Matrix::new(1, 1, vec![1.0]).unwrap();
        let t = Matrix::new(1, 1, vec![0.0]).unwrap();
        let c = n.forward(&x, Mode::Train, &mut rng()).unwrap();
        let (loss, g) = n.backward(&c, &t).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(g.0, vec![4.0, 4.0]);
    }

    #[test]
    fn dropped_unit_gets_no_gradient() {
        let n = Network::new(mlp(&[3, 32, 1], 0.5), 5).unwrap();
        let x = Matrix::new(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        let t = Matrix::new(1, 1, vec![1.0]).unwrap();
        let c = n.forward(&x, Mode::Train, &mut rng()).unwrap();
        let (_, g) = n.backward(&c, &t).unwrap();
        let mask = c.masks[0].as_ref().unwrap();
        let dropped: Vec<usize> = (0..32).filter(|&o| mask[o] == 0.0).collect();
        assert!(!dropped.is_empty());
        for o in dropped {
            assert!(g.0[o * 3..o * 3 + 3].iter().all(|&v| v == 0.0));
            assert_eq!(g.0[96 + o], 0.0);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut n = Network::new(mlp(&[2, 4, 1], 0.0), 1).unwrap();
        let x = Matrix::new(1, 2, vec![0.5, 0.5]).unwrap();
        let t = Matrix::new(1, 1, vec![0.0]).unwrap();
        let c = n.forward(&x, Mode::Train, &mut rng()).unwrap();
        let (_, g) = n.backward(&c, &t).unwrap();
        let mut adam = AdamState::new(n.param_count());
        n.apply_adam(&mut adam, &g).unwrap();
        assert!(matches!(n.backward(&c, &t), Err(Error::StaleCache)));
    }

    #[test]
    fn adam_single_step() {
        let mut adam = AdamState::new(1);
        let mut w = [1.0];
        adam.step(&mut w, &[0.5]).unwrap();
        // m_hat = 0.5, v_hat = 0.25
        let expected = 1.0 - 1e-3 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((w[0] - expected).abs() < 1e-15);
        assert!((w[0] - 0.999).abs() < 1e-10);
    }

    #[test]
    fn adam_zero_gradient_is_inert() {
        let mut adam = AdamState::new(3);
        let mut w = [0.3, -1.0, 2.0];
        for _ in 0..50 {
            adam.step(&mut w, &[0.0; 3]).unwrap();
        }
        assert_eq!(w, [0.3, -1.0, 2.0]);
        assert!(adam.step(&mut w, &[0.0; 2]).is_err());
    }

    #[test]
    fn adam_is_elementwise() {
        let mut adam = AdamState::new(2);
        let mut w = [0.7, 0.7];
        for k in 0..20 {
            let g = (k as f64 * 0.37).sin();
            adam.step(&mut w, &[g, g]).unwrap();
        }
        assert_eq!(w[0], w[1]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let n = Network::new(mlp(&[48, 128, 64, 32, 16, 20], 0.2), 9).unwrap();
        let ck = Checkpoint::from_network(&n, None, NormalizationSpec::default());
        let text = serde_json::to_string(&ck).unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        let m = back.network().unwrap();
        assert_eq!(m.param_count(), back.param_count);
        let mut r = rng();
        for _ in 0..100 {
            let x: Vec<f64> = (0..48).map(|_| r.random::<f64>()).collect();
            assert_eq!(n.predict(&x).unwrap(), m.predict(&x).unwrap());
        }
    }

    #[test]
    fn checkpoint_schema_errors() {
        let n = Network::new(mlp(&[2, 3, 1], 0.0), 9).unwrap();
        let ck = Checkpoint::from_network(&n, None, NormalizationSpec::default());
        let mut v: serde_json::Value = serde_json::to_value(&ck).unwrap();
        v.as_object_mut().unwrap().remove("norm");
        assert!(Checkpoint::from_json(&v.to_string()).is_err());

        let mut v: serde_json::Value = serde_json::to_value(&ck).unwrap();
        v["weights"][0].as_array_mut().unwrap().pop();
        assert!(Checkpoint::from_json(&v.to_string()).is_err());

        let mut v: serde_json::Value = serde_json::to_value(&ck).unwrap();
        v["param_count"] = 3.into();
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
        assert!(Checkpoint::from_json("not json").is_err());
    }
}
