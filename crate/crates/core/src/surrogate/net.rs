//! Fully connected design-to-gradient network trained with Adam on the full
//! batch. Inputs and targets are standardized per component; predictions are
//! mapped back to gradient units.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Activation::Tanh),
            other => Err(Error::Format(format!("unknown activation tag {other}"))),
        }
    }
}

/// One simulated design and its objective gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub design: Vec<f64>,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    /// `floor_to_one` replaces vanishing scales by 1 (inputs); otherwise
    /// they become 0 so the component is predicted as its mean (targets).
    fn fit(data: &Array2<f64>, floor_to_one: bool) -> Self {
        let mean = data.mean_axis(Axis(0)).expect("nonempty batch");
        let std = data.std_axis(Axis(0), 0.0);
        let magnitude = mean
            .iter()
            .chain(std.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        let tiny = 1e-12 * magnitude.max(f64::MIN_POSITIVE);
        let scale = std.mapv(|s| {
            if s > tiny {
                s
            } else if floor_to_one {
                1.0
            } else {
                0.0
            }
        });
        Self { mean, scale }
    }

    fn forward(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data - &self.mean;
        for mut row in out.rows_mut() {
            row.zip_mut_with(&self.scale, |v, &s| *v = if s > 0.0 { *v / s } else { 0.0 });
        }
        out
    }

    fn inverse(&self, data: &Array2<f64>) -> Array2<f64> {
        data * &self.scale + &self.mean
    }

    fn is_degenerate(&self) -> bool {
        self.scale.iter().all(|&s| s == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Scaling {
    input: Standardizer,
    output: Standardizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientNet {
    layer_dims: Vec<usize>,
    activation: Activation,
    // weights[l] has shape (layer_dims[l], layer_dims[l + 1])
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    scaling: Option<Scaling>,
}

impl GradientNet {
    /// Glorot-uniform weights and zero biases.
    pub fn new(layer_dims: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(
                "layer_dims",
                format!("need at least two positive widths, got {layer_dims:?}"),
            ));
        }
        if layer_dims[0] != *layer_dims.last().unwrap() {
            return Err(Error::invalid(
                "layer_dims",
                "input and output widths must both equal the design size",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_dims,
            activation,
            weights,
            biases,
            scaling: None,
        })
    }

    /// `[n, hidden..., n]` layout.
    pub fn with_hidden(n: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(n);
        dims.extend_from_slice(hidden);
        dims.push(n);
        Self::new(dims, Activation::Tanh, seed)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn is_trained(&self) -> bool {
        self.scaling.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Activations of every layer for a standardized batch; the last entry
    /// is the (linear) output.
    fn forward(&self, input: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(input.clone());
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(w) + b;
            if l < last {
                match self.activation {
                    Activation::Tanh => z.mapv_inplace(f64::tanh),
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Gradients of the mean-squared error with respect to weights and biases.
    fn backward(
        &self,
        acts: &[Array2<f64>],
        target: &Array2<f64>,
    ) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let output = acts.last().unwrap();
        let count = (output.len()) as f64;
        let mut delta = (output - target) * (2.0 / count);
        let mut dw = vec![Array2::zeros((0, 0)); self.weights.len()];
        let mut db = vec![Array1::zeros(0); self.weights.len()];
        for l in (0..self.weights.len()).rev() {
            dw[l] = acts[l].t().dot(&delta);
            db[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l].t());
                prev.zip_mut_with(&acts[l], |d, &a| *d *= 1.0 - a * a);
                delta = prev;
            }
        }
        (dw, db)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("prediction input", self.input_dim(), x.len())?;
        let batch = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        let out = self.predict_batch(&batch)?;
        Ok(out.row(0).to_vec())
    }

    pub fn predict_batch(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        let scaling = self.scaling.as_ref().ok_or(Error::Untrained)?;
        check_len("prediction input", self.input_dim(), inputs.ncols())?;
        if scaling.output.is_degenerate() {
            let mut out = Array2::zeros((inputs.nrows(), self.input_dim()));
            out.rows_mut().into_iter().for_each(|mut r| r.assign(&scaling.output.mean));
            return Ok(out);
        }
        let z = scaling.input.forward(inputs);
        let y = self.forward(&z).pop().unwrap();
        let out = scaling.output.inverse(&y);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("surrogate prediction"));
        }
        Ok(out)
    }

    /// Flat binary layout: magic, layer dims, activation, scalers, then
    /// row-major weights and biases per layer, all little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let scaling = self.scaling.as_ref().ok_or(Error::Untrained)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(self.activation.tag());
        let mut put = |values: ArrayView1<'_, f64>| {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(scaling.input.mean.view());
        put(scaling.input.scale.view());
        put(scaling.output.mean.view());
        put(scaling.output.scale.view());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for row in w.rows() {
                put(row);
            }
            put(b.view());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&count) {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let dims = (0..count)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag)?;
        let activation = Activation::from_tag(tag[0])?;
        let n = dims[0];
        let expected = 4 * n
            + dims
                .windows(2)
                .map(|p| p[0] * p[1] + p[1])
                .sum::<usize>();
        if r.len() != 8 * expected {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                8 * expected,
                r.len()
            )));
        }
        let mut take = |len: usize| -> Result<Array1<f64>> {
            (0..len).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>().map(Array1::from)
        };
        let input = Standardizer { mean: take(n)?, scale: take(n)? };
        let output = Standardizer { mean: take(n)?, scale: take(n)? };
        let mut net = Self::new(dims.clone(), activation, 0)?;
        for (l, pair) in dims.windows(2).enumerate() {
            let flat = take(pair[0] * pair[1])?;
            net.weights[l] = flat
                .into_shape_with_order((pair[0], pair[1]))
                .map_err(|e| Error::Format(e.to_string()))?;
            net.biases[l] = take(pair[1])?;
        }
        net.scaling = Some(Scaling { input, output });
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

const MAGIC: &[u8; 4] = b"GNET";

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 1e-3,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_validation_loss: Option<f64>,
    pub epochs_run: usize,
    /// All targets identical; the net predicts their mean.
    pub constant_fallback: bool,
}

fn stack(rows: impl ExactSizeIterator<Item = Vec<f64>>, width: usize) -> Array2<f64> {
    let n = rows.len();
    let flat: Vec<f64> = rows.flatten().collect();
    Array2::from_shape_vec((n, width), flat).expect("uniform row width")
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = a - b;
    diff.mapv(|v| v * v).mean().unwrap_or(0.0)
}

/// Fits `net` to `pairs`. `validation` drives early stopping and best-weight
/// selection; when empty the training loss is used instead.
pub fn train(
    pairs: &[SamplePair],
    validation: &[SamplePair],
    mut net: GradientNet,
    cfg: &TrainConfig,
) -> Result<(GradientNet, TrainReport)> {
    if pairs.len() < 2 {
        return Err(Error::invalid(
            "training set",
            format!("need at least 2 pairs, got {}", pairs.len()),
        ));
    }
    let n = net.input_dim();
    for p in pairs.iter().chain(validation) {
        check_len("training design", n, p.design.len())?;
        check_len("training gradient", n, p.gradient.len())?;
    }
    let x = stack(pairs.iter().map(|p| p.design.clone()), n);
    let y = stack(pairs.iter().map(|p| p.gradient.clone()), n);
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training data"));
    }
    let scaling = Scaling {
        input: Standardizer::fit(&x, true),
        output: Standardizer::fit(&y, false),
    };
    if scaling.output.is_degenerate() {
        net.scaling = Some(scaling);
        return Ok((
            net,
            TrainReport {
                initial_loss: 0.0,
                final_loss: 0.0,
                best_validation_loss: None,
                epochs_run: 0,
                constant_fallback: true,
            },
        ));
    }
    let xs = scaling.input.forward(&x);
    let ys = scaling.output.forward(&y);
    let val = if validation.is_empty() {
        None
    } else {
        let vx = stack(validation.iter().map(|p| p.design.clone()), n);
        let vy = stack(validation.iter().map(|p| p.gradient.clone()), n);
        Some((scaling.input.forward(&vx), scaling.output.forward(&vy)))
    };

    let initial_loss = mse(net.forward(&xs).last().unwrap(), &ys);
    let mut adam = Adam::new(&net, cfg.learning_rate);
    let mut best = (f64::INFINITY, net.weights.clone(), net.biases.clone());
    let mut stale = 0;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let acts = net.forward(&xs);
        let loss = mse(acts.last().unwrap(), &ys);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        let monitored = match &val {
            Some((vx, vy)) => mse(net.forward(vx).last().unwrap(), vy),
            None => loss,
        };
        if monitored < best.0 {
            best = (monitored, net.weights.clone(), net.biases.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
        let (dw, db) = net.backward(&acts, &ys);
        adam.step(&mut net, &dw, &db);
        epochs_run = epoch + 1;
    }
    let last_weights = (net.weights.clone(), net.biases.clone());
    net.weights = best.1;
    net.biases = best.2;
    let mut final_loss = mse(net.forward(&xs).last().unwrap(), &ys);
    if final_loss >= initial_loss {
        // validation picked weights that fit the training set worse than at
        // initialization; keep the fully trained ones instead
        net.weights = last_weights.0;
        net.biases = last_weights.1;
        final_loss = mse(net.forward(&xs).last().unwrap(), &ys);
    }
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged { epoch: epochs_run, loss: final_loss });
    }
    net.scaling = Some(scaling);
    Ok((
        net,
        TrainReport {
            initial_loss,
            final_loss,
            best_validation_loss: val.as_ref().map(|_| best.0),
            epochs_run,
            constant_fallback: false,
        },
    ))
}

/// Mean cosine similarity between predicted and stored gradients.
pub fn mean_cosine_similarity(net: &GradientNet, pairs: &[SamplePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("pairs", "need at least one pair"));
    }
    let mut total = 0.0;
    for p in pairs {
        let pred = net.predict(&p.design)?;
        total += 1.0 - super::cosine_distance(&pred, &p.gradient)?;
    }
    Ok(total / pairs.len() as f64)
}

struct Adam {
    lr: f64,
    t: i32,
    mw: Vec<Array2<f64>>,
    vw: Vec<Array2<f64>>,
    mb: Vec<Array1<f64>>,
    vb: Vec<Array1<f64>>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &GradientNet, lr: f64) -> Self {
        let zw: Vec<Array2<f64>> = net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
        let zb: Vec<Array1<f64>> = net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect();
        Self {
            lr,
            t: 0,
            mw: zw.clone(),
            vw: zw,
            mb: zb.clone(),
            vb: zb,
        }
    }

    fn step(&mut self, net: &mut GradientNet, dw: &[Array2<f64>], db: &[Array1<f64>]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let lr = self.lr;
        let update = |param: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *param -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        for l in 0..net.weights.len() {
            ndarray::Zip::from(&mut net.weights[l])
                .and(&mut self.mw[l])
                .and(&mut self.vw[l])
                .and(&dw[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            ndarray::Zip::from(&mut net.biases[l])
                .and(&mut self.mb[l])
                .and(&mut self.vb[l])
                .and(&db[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_pairs(a: &Array2<f64>, count: usize, seed: u64) -> Vec<SamplePair> {
        let n = a.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let design: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                let gradient = a.dot(&Array1::from(design.clone())).to_vec();
                SamplePair { design, gradient }
            })
            .collect()
    }

    fn random_map(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0))
    }

    fn relative_error(net: &GradientNet, pairs: &[SamplePair]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for p in pairs {
            let pred = net.predict(&p.design).unwrap();
            num += pred.iter().zip(&p.gradient).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            den += p.gradient.iter().map(|b| b * b).sum::<f64>();
        }
        (num / den).sqrt()
    }

    #[test]
    fn learns_linear_map() {
        let n = 10;
        let a = random_map(n, 1);
        let train_set = linear_pairs(&a, 128, 2);
        let held_out = linear_pairs(&a, 32, 3);
        let net = GradientNet::with_hidden(n, &[64, 64], 4).unwrap();
        let cfg = TrainConfig { epochs: 2000, learning_rate: 3e-3, patience: 200 };
        let (net, report) = train(&train_set, &[], net, &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss);
        let err = relative_error(&net, &held_out);
        assert!(err <= 0.05, "held-out relative error {err}");
    }

    #[test]
    fn constant_targets_fall_back() {
        let n = 6;
        let gradient = vec![-0.3, -1.2, 0.5, 2.0, -0.01, 7.0];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs: Vec<SamplePair> = (0..5)
            .map(|_| SamplePair {
                design: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
                gradient: gradient.clone(),
            })
            .collect();
        let net = GradientNet::with_hidden(n, &[8], 0).unwrap();
        let (net, report) = train(&pairs, &[], net, &TrainConfig::default()).unwrap();
        assert!(report.constant_fallback);
        let pred = net.predict(&[0.5; 6]).unwrap();
        for (p, g) in pred.iter().zip(&gradient) {
            assert!((p - g).abs() <= 1e-3 * g.abs());
        }
    }

    #[test]
    fn reproduces_training_pairs() {
        let n = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pairs: Vec<SamplePair> = (0..16)
            .map(|_| {
                let design: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
                let gradient = design.iter().enumerate().map(|(i, d)| -(d * d) * (1.0 + i as f64)).collect();
                SamplePair { design, gradient }
            })
            .collect();
        let net = GradientNet::with_hidden(n, &[32, 32], 1).unwrap();
        let (net, report) = train(&pairs, &[], net, &TrainConfig::default()).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert!(mean_cosine_similarity(&net, &pairs).unwrap() >= 0.95);
        let a = net.predict(&pairs[0].design).unwrap();
        let b = net.predict(&pairs[0].design).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn untrained_and_invalid() {
        let net = GradientNet::with_hidden(4, &[3], 0).unwrap();
        assert!(matches!(net.predict(&[0.0; 4]), Err(Error::Untrained)));
        assert!(net.to_bytes().is_err());
        assert!(GradientNet::new(vec![4, 3, 5], Activation::Tanh, 0).is_err());
        assert!(GradientNet::new(vec![4], Activation::Tanh, 0).is_err());
        let one = [SamplePair { design: vec![0.0; 4], gradient: vec![1.0; 4] }];
        assert!(train(&one, &[], net.clone(), &TrainConfig::default()).is_err());
        let bad = vec![
            SamplePair { design: vec![0.0; 4], gradient: vec![f64::NAN; 4] },
            SamplePair { design: vec![1.0; 4], gradient: vec![1.0; 4] },
        ];
        assert!(train(&bad, &[], net, &TrainConfig::default()).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let n = 5;
        let a = random_map(n, 3);
        let pairs = linear_pairs(&a, 12, 4);
        let net = GradientNet::with_hidden(n, &[7, 6], 2).unwrap();
        let cfg = TrainConfig { epochs: 50, ..TrainConfig::default() };
        let (net, _) = train(&pairs, &pairs[..3], net, &cfg).unwrap();
        let bytes = net.to_bytes().unwrap();
        let back = GradientNet::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert!(GradientNet::from_bytes(&bytes[..bytes.len() - 1]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        net.save(&path).unwrap();
        assert_eq!(GradientNet::load(&path).unwrap(), net);
    }
}
